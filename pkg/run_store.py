import csv
import hashlib
import logging
import subprocess
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import orjson

logger = logging.getLogger(__name__)


def canonical_json(document: Any) -> bytes:
    """Sorted-key JSON bytes used for hashing and config echoes."""
    return orjson.dumps(document, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY)


def config_hash(document: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON of a resolved configuration."""
    return hashlib.sha256(canonical_json(document)).hexdigest()


def git_describe() -> str:
    """`git describe --always --dirty` of the working tree, or 'unknown' outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else "unknown"


class RunStore:
    def __init__(self, out_dir: str, seed: int, config: Dict[str, Any]):
        """
        Initialize the output store for one run.

        Args:
            out_dir (str): Directory receiving CSV, JSON and checkpoint files
            seed (int): Seed recorded in every provenance line
            config (Dict[str, Any]): Resolved configuration document
        """
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.config = config
        self.config_hash = config_hash(config)
        self.git = git_describe()
        self.stats = {
            "csv_files": 0,
            "json_files": 0,
            "checkpoints": 0,
        }
        self._ensure_out_dir()

    def _ensure_out_dir(self) -> None:
        """Create output directory if it doesn't exist."""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def provenance_line(self) -> str:
        return f"# seed={self.seed} git={self.git} config_hash={self.config_hash}"

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """
        Write a CSV file: provenance comment line, header row, data rows.

        Args:
            name (str): File name inside the output directory
            header (Sequence[str]): Column names
            rows (Iterable[Sequence[Any]]): Data rows

        Returns:
            Path: The written file
        """
        path = self.path(name)
        with path.open('w', encoding='utf-8', newline='') as f:
            f.write(self.provenance_line() + "\n")
            writer = csv.writer(f)
            writer.writerow(list(header))
            for row in rows:
                writer.writerow([_format_cell(value) for value in row])
        self.stats["csv_files"] += 1
        logger.debug(f"Wrote {path}")
        return path

    def open_csv(self, name: str, header: Sequence[str]) -> "CsvAppender":
        """Open a CSV file for row-by-row appends (per-iteration metrics)."""
        self.stats["csv_files"] += 1
        return CsvAppender(self.path(name), self.provenance_line(), header)

    def write_json(self, name: str, document: Any) -> Path:
        path = self.path(name)
        path.write_bytes(orjson.dumps(document, option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY))
        self.stats["json_files"] += 1
        return path

    def checkpoint_path(self, iteration: Optional[int] = None) -> Path:
        """Path of a periodic checkpoint, or of the final checkpoint when iteration is None."""
        self.stats["checkpoints"] += 1
        if iteration is None:
            return self.path("checkpoint_final.json")
        return self.path(f"checkpoint_{iteration:06d}.json")

    def get_stats(self) -> Dict[str, Any]:
        return self.stats


class CsvAppender:
    def __init__(self, path: Path, provenance: str, header: Sequence[str]):
        self.path = path
        self.header = list(header)
        self._file = path.open('w', encoding='utf-8', newline='')
        self._file.write(provenance + "\n")
        self._writer = csv.writer(self._file)
        self._writer.writerow(self.header)
        self._file.flush()

    def append(self, row: Dict[str, Any]) -> None:
        self._writer.writerow([_format_cell(row.get(column, "")) for column in self.header])
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "CsvAppender":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _format_cell(value: Any) -> Any:
    # repr keeps float64 values exact so seeded reruns compare bitwise
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item") and callable(value.item):
        return _format_cell(value.item())
    if value is None:
        return ""
    return value


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Read a CSV written by RunStore, skipping the provenance line."""
    with Path(path).open('r', encoding='utf-8', newline='') as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))
