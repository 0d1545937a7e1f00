import os
from pathlib import Path
from typing import Dict

import numpy as np
from dotenv import load_dotenv

from acoustics import DEFAULT_RATE, DEFAULT_WINDOW, AudioClip, bin_center, reference_tone, tone, write_wav

# Load environment variables
load_dotenv()

FIXTURE_DIR = os.getenv("QUIETGAIT_FIXTURE_DIR", "fixtures")

# Bin 85 of a 4096-point window at 48 kHz: 996.09375 Hz
TONE_BIN = 85


def make_fixtures(rate: int = DEFAULT_RATE, duration: float = 2.0, seed: int = 0) -> Dict[str, AudioClip]:
    """Synthesize the WAV fixtures used by the spectral tests and the analyze-wav examples."""
    rng = np.random.default_rng(seed)
    samples = int(round(rate * duration))
    return {
        "tone_996hz.wav": tone(bin_center(TONE_BIN, DEFAULT_WINDOW, rate), 0.5, rate, duration),
        "reference_1khz.wav": reference_tone(rate, duration),
        "silence.wav": AudioClip(sample_rate=rate, samples=np.zeros(samples)),
        "white_noise.wav": AudioClip(sample_rate=rate, samples=rng.uniform(-0.1, 0.1, size=samples)),
    }


def write_fixtures(out_dir: str = FIXTURE_DIR) -> Dict[str, Path]:
    """Write every fixture as 16-bit PCM mono into out_dir."""
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, clip in make_fixtures().items():
        path = target / name
        path.write_bytes(write_wav(clip))
        written[name] = path
        print(f"Wrote {path} ({clip.duration:.2f} s at {clip.sample_rate} Hz)")
    return written


def main():
    """Main function to generate WAV fixtures."""
    try:
        write_fixtures()
        print("Fixture generation completed successfully!")
    except OSError as e:
        print(f"Error generating fixtures: {str(e)}")


if __name__ == "__main__":
    main()
