import os
import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class SettingsError(Exception):
    """Custom exception for process-settings errors."""
    pass


def worker_count() -> int:
    """
    Upper bound on concurrent evaluation workers.

    Returns:
        int: QUIETGAIT_THREADS if set, otherwise the CPU count
    """
    raw = os.getenv("QUIETGAIT_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise SettingsError(f"QUIETGAIT_THREADS must be an integer, got '{raw}'")
    if value < 1:
        raise SettingsError(f"QUIETGAIT_THREADS must be >= 1, got {value}")
    return value


def log_level() -> int:
    name = os.getenv("QUIETGAIT_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise SettingsError(f"Unknown QUIETGAIT_LOG_LEVEL '{name}'")
    return level


def configure_logging(run_log: Optional[Path] = None) -> None:
    """
    Set up root logging once per process.

    Args:
        run_log (Optional[Path]): Extra log file for a training run (train.log in the output directory)
    """
    handlers = [logging.StreamHandler()]
    extra = os.getenv("QUIETGAIT_LOG_FILE")
    if extra:
        handlers.append(logging.FileHandler(extra))
    if run_log is not None:
        Path(run_log).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(run_log))
    logging.basicConfig(
        level=log_level(),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
