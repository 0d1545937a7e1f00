"""
Footstep-noise analysis.

WAV ingestion, a radix-2 FFT, Hamming-windowed Welch PSD, audible-band power
in dB against a 1e-10 amplitude sinusoid, and the simulator-side penalty
metrics (touchdown speed, joint and base angular acceleration) with an impulse
proxy signal that lets simulated gaits run through the same spectral pipeline.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import get_window

logger = logging.getLogger(__name__)

REFERENCE_AMPLITUDE = 1e-10
REFERENCE_POWER = REFERENCE_AMPLITUDE ** 2 / 2.0
SILENCE_DB = -300.0
AUDIBLE_BAND = (20.0, 20000.0)
DEFAULT_WINDOW = 4096
DEFAULT_OVERLAP = 0.5
DEFAULT_RATE = 48000


class AcousticsError(Exception):
    """Base exception for acoustic analysis errors."""
    pass


class WavParseError(AcousticsError):
    """Raised when a WAV container cannot be decoded; names the offending chunk."""

    def __init__(self, chunk: str, message: str):
        super().__init__(f"chunk '{chunk}': {message}")
        self.chunk = chunk


class InsufficientDataError(AcousticsError):
    pass


class SpectrumError(AcousticsError):
    pass


@dataclass
class AudioClip:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.sample_rate <= 0:
            raise AcousticsError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AcousticsError("samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectralReport:
    frequencies: np.ndarray  # Hz, window/2 + 1 bins
    power: np.ndarray        # amplitude^2 per bin
    window: int
    overlap: float
    segments: int
    sample_rate: int


@dataclass
class TrajectoryRecord:
    """One control step of one simulated robot."""
    time: float
    touchdown_speeds: Sequence[float]
    joint_acceleration: np.ndarray     # (12,) rad/s^2
    base_ang_acceleration: np.ndarray  # (2,) roll/pitch rad/s^2
    contacts: Optional[np.ndarray] = None    # (4,) bool
    foot_speed: Optional[np.ndarray] = None  # (4,) m/s
    gain_scale: Optional[np.ndarray] = None  # (12,) sigmoid(x)


@dataclass
class PenaltyMetrics:
    """Time-averaged noisy-walking penalties; contact_velocity is None when no foot touched down."""
    contact_velocity: Optional[float]
    joint_acceleration: float
    base_ang_acceleration: float
    duration: float
    touchdown_count: int
    sample_count: int

    def rows(self) -> List[Tuple[str, Optional[float], str]]:
        return [
            ("contact_velocity", self.contact_velocity, "m/s"),
            ("joint_acceleration", self.joint_acceleration, "rad/s^2"),
            ("base_ang_acceleration", self.base_ang_acceleration, "rad/s^2"),
            ("duration", self.duration, "s"),
            ("touchdown_count", self.touchdown_count, "count"),
        ]

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {name: value for name, value, _ in self.rows()}


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def read_wav(data: bytes) -> AudioClip:
    """
    Decode a RIFF/WAVE file holding 16-bit PCM, mono or stereo.

    Stereo is downmixed by averaging; samples are scaled by 1/32768.
    """
    if len(data) < 12:
        raise WavParseError("RIFF", "file shorter than the RIFF header")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavParseError("RIFF", "not a RIFF/WAVE container")

    channels = rate = bits = None
    offset = 12
    while offset < len(data):
        if offset + 8 > len(data):
            raise WavParseError("header", f"truncated chunk header at byte {offset}")
        chunk_id, size = struct.unpack("<4sI", data[offset:offset + 8])
        name = chunk_id.decode("latin-1")
        body = data[offset + 8:offset + 8 + size]
        if len(body) < size:
            raise WavParseError(name, f"declares {size} bytes but only {len(body)} remain")

        if chunk_id == b"fmt ":
            if size < 16:
                raise WavParseError(name, f"fmt chunk too short ({size} bytes)")
            audio_format, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
            if audio_format != 1:
                raise WavParseError(name, f"unsupported audio format {audio_format} (PCM is 1)")
            if bits != 16:
                raise WavParseError(name, f"unsupported bit depth {bits} (16 required)")
            if channels not in (1, 2):
                raise WavParseError(name, f"unsupported channel count {channels}")
            if rate == 0:
                raise WavParseError(name, "sample rate is zero")
        elif chunk_id == b"data":
            if channels is None:
                raise WavParseError(name, "data chunk before fmt chunk")
            frame = 2 * channels
            if size % frame:
                raise WavParseError(name, f"size {size} is not a whole number of {frame}-byte frames")
            pcm = np.frombuffer(body, dtype="<i2").astype(float).reshape(-1, channels)
            return AudioClip(sample_rate=int(rate), samples=pcm.mean(axis=1) / 32768.0)
        offset += 8 + size + (size & 1)

    raise WavParseError("data", "no data chunk found")


def write_wav(clip: AudioClip) -> bytes:
    """Encode a clip as 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    if len(pcm) & 1:
        chunks += b"\x00"
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


# ---------------------------------------------------------------------------
# Spectra
# ---------------------------------------------------------------------------

def _bit_reversed(n: int) -> np.ndarray:
    levels = n.bit_length() - 1
    index = np.arange(n)
    reversed_index = np.zeros(n, dtype=np.int64)
    for bit in range(levels):
        reversed_index |= ((index >> bit) & 1) << (levels - 1 - bit)
    return reversed_index


def fft(samples: np.ndarray) -> np.ndarray:
    """
    Iterative radix-2 Cooley-Tukey DFT along the last axis.

    Raises:
        SpectrumError: length is not a power of two
    """
    x = np.asarray(samples)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise SpectrumError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    a = x[..., _bit_reversed(n)].astype(complex)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(lead + (n // size, size))
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        size *= 2
    return a


def welch_psd(clip: AudioClip, window: int = DEFAULT_WINDOW, overlap: float = DEFAULT_OVERLAP) -> SpectralReport:
    """
    Hamming-windowed Welch power spectrum.

    Each segment's one-sided periodogram is scaled by 1/(sum w)^2 (doubled off
    DC and Nyquist), so a sinusoid of amplitude A centred on a bin reports A^2/2
    in that bin. Segment periodograms are averaged.
    """
    if not 0.0 <= overlap < 1.0:
        raise SpectrumError(f"overlap must lie in [0, 1), got {overlap}")
    if clip.samples.size < window:
        raise InsufficientDataError(f"clip has {clip.samples.size} samples, one window needs {window}")
    step = max(1, int(round(window * (1.0 - overlap))))
    segments = (clip.samples.size - window) // step + 1
    taper = get_window("hamming", window)
    starts = np.arange(segments) * step
    frames = clip.samples[starts[:, None] + np.arange(window)[None, :]] * taper
    spectrum = fft(frames)[:, :window // 2 + 1]
    power = np.abs(spectrum) ** 2 / np.sum(taper) ** 2
    power[:, 1:window // 2] *= 2.0
    if window % 2:
        power[:, -1] *= 2.0
    return SpectralReport(
        frequencies=np.arange(window // 2 + 1) * clip.sample_rate / window,
        power=power.mean(axis=0),
        window=window,
        overlap=overlap,
        segments=int(segments),
        sample_rate=clip.sample_rate,
    )


def power_to_db(power: np.ndarray) -> np.ndarray:
    """Power in dB against a 1e-10 amplitude sinusoid, floored at -300 dB."""
    power = np.asarray(power, dtype=float)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power / REFERENCE_POWER)
    return np.maximum(np.where(power > 0.0, db, SILENCE_DB), SILENCE_DB)


def bin_power_db(report: SpectralReport) -> np.ndarray:
    """Per-bin power in dB against a 1e-10 amplitude sinusoid."""
    return power_to_db(report.power)


def _band_mask(report: SpectralReport, f_lo: float, f_hi: float) -> np.ndarray:
    mask = (report.frequencies >= f_lo) & (report.frequencies <= f_hi)
    if not np.any(mask):
        raise SpectrumError(f"no bins between {f_lo} Hz and {f_hi} Hz")
    return mask


def band_power(report: SpectralReport, f_lo: float = AUDIBLE_BAND[0], f_hi: float = AUDIBLE_BAND[1]) -> float:
    """Mean per-bin power over [f_lo, f_hi]."""
    return float(np.mean(report.power[_band_mask(report, f_lo, f_hi)]))


def band_power_db(report: SpectralReport, f_lo: float = AUDIBLE_BAND[0], f_hi: float = AUDIBLE_BAND[1]) -> float:
    """dB of the mean per-bin power over [f_lo, f_hi]; silence floors at -300 dB."""
    return float(power_to_db(band_power(report, f_lo, f_hi)))


def peak_frequency(report: SpectralReport, f_lo: float = AUDIBLE_BAND[0], f_hi: float = AUDIBLE_BAND[1]) -> float:
    mask = _band_mask(report, f_lo, f_hi)
    candidates = np.flatnonzero(mask)
    return float(report.frequencies[candidates[np.argmax(report.power[candidates])]])


def tone(frequency: float, amplitude: float = 1.0, rate: int = DEFAULT_RATE, duration: float = 1.0) -> AudioClip:
    t = np.arange(int(round(rate * duration))) / rate
    return AudioClip(sample_rate=rate, samples=amplitude * np.sin(2.0 * np.pi * frequency * t))


def bin_center(index: int, window: int = DEFAULT_WINDOW, rate: int = DEFAULT_RATE) -> float:
    return index * rate / window


def reference_tone(rate: int = DEFAULT_RATE, duration: float = 1.0) -> AudioClip:
    """The 1 kHz, amplitude 1.0 reference signal."""
    return tone(1000.0, 1.0, rate, duration)


def relative_to_reference_db(band_db: float, reference_db: float) -> float:
    """Band power expressed against the reference tone's band power."""
    return band_db - reference_db


def spectrum_rows(report: SpectralReport) -> List[Tuple[float, float]]:
    return [(float(f), float(p)) for f, p in zip(report.frequencies, report.power)]


# ---------------------------------------------------------------------------
# Simulator-side metrics
# ---------------------------------------------------------------------------

def sim_penalty_metrics(records: Sequence[TrajectoryRecord], duration: float = 10.0, control_dt: float = 0.01,
                        start: float = 0.0) -> PenaltyMetrics:
    """
    Noisy-walking penalty averages over [start, start + duration).

    Contact velocity is the mean touchdown speed over every touchdown event;
    the acceleration metrics are time means of Euclidean norms.

    Raises:
        InsufficientDataError: the records do not cover the requested window
    """
    if duration <= 0.0:
        raise AcousticsError(f"duration must be positive, got {duration}")
    end = start + duration
    eps = 0.5 * control_dt
    window = [r for r in records if start - eps <= r.time - control_dt < end - eps]
    needed = int(round(duration / control_dt))
    if len(window) < needed:
        raise InsufficientDataError(f"trajectory covers {len(window)} control steps, {needed} required")
    speeds = np.array([s for r in window for s in r.touchdown_speeds], dtype=float)
    joint = np.array([np.linalg.norm(r.joint_acceleration) for r in window])
    base = np.array([np.linalg.norm(r.base_ang_acceleration) for r in window])
    return PenaltyMetrics(
        contact_velocity=float(speeds.mean()) if speeds.size else None,
        joint_acceleration=float(joint.mean()),
        base_ang_acceleration=float(base.mean()),
        duration=float(duration),
        touchdown_count=int(speeds.size),
        sample_count=len(window),
    )


def combine_metrics(parts: Sequence[PenaltyMetrics]) -> PenaltyMetrics:
    """Weighted mean of metrics over disjoint windows (touchdown- and sample-weighted)."""
    if not parts:
        raise InsufficientDataError("nothing to combine")
    touchdowns = sum(p.touchdown_count for p in parts)
    samples = sum(p.sample_count for p in parts)
    contact = None
    if touchdowns:
        contact = sum(p.contact_velocity * p.touchdown_count for p in parts if p.touchdown_count) / touchdowns
    return PenaltyMetrics(
        contact_velocity=contact,
        joint_acceleration=sum(p.joint_acceleration * p.sample_count for p in parts) / samples,
        base_ang_acceleration=sum(p.base_ang_acceleration * p.sample_count for p in parts) / samples,
        duration=sum(p.duration for p in parts),
        touchdown_count=touchdowns,
        sample_count=samples,
    )


def impact_proxy_signal(records: Sequence[TrajectoryRecord], rate: int = DEFAULT_RATE,
                        total_mass: float = 2.2, duration: Optional[float] = None) -> AudioClip:
    """
    Impulse train with one impulse per touchdown of amplitude 1/2 (m/4) v^2.

    Impulses sit at round(time * rate); the clip spans `duration` seconds, or
    the trajectory when duration is None.
    """
    span = duration if duration is not None else (max((r.time for r in records), default=0.0))
    samples = np.zeros(max(int(round(span * rate)) + 1, 1))
    effective_mass = total_mass / 4.0
    for record in records:
        if not record.touchdown_speeds:
            continue
        index = int(round(record.time * rate))
        if index >= samples.size:
            continue
        samples[index] += sum(0.5 * effective_mass * v * v for v in record.touchdown_speeds)
    clipped = samples > 1.0
    if np.any(clipped):
        logger.warning(f"Impact proxy peaks at {samples.max():.4g}; {int(clipped.sum())} of {samples.size} "
                       f"samples clipped to full scale")
        samples = np.minimum(samples, 1.0)
    return AudioClip(sample_rate=rate, samples=samples)
