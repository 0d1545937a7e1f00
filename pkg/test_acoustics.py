import logging
import struct

import numpy as np
import pytest
from scipy.signal import get_window, welch

from acoustics import (
    REFERENCE_POWER,
    SILENCE_DB,
    AcousticsError,
    AudioClip,
    InsufficientDataError,
    PenaltyMetrics,
    SpectrumError,
    TrajectoryRecord,
    WavParseError,
    band_power,
    band_power_db,
    bin_center,
    bin_power_db,
    combine_metrics,
    fft,
    impact_proxy_signal,
    peak_frequency,
    read_wav,
    reference_tone,
    relative_to_reference_db,
    sim_penalty_metrics,
    tone,
    welch_psd,
    write_wav,
)

RATE = 48000
WINDOW = 4096
TONE_BIN = 85
SIDE_LOBE = (0.23 / 0.54) ** 2


def wav_bytes(chunks: bytes) -> bytes:
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def fmt_chunk(audio_format: int = 1, channels: int = 1, rate: int = RATE, bits: int = 16) -> bytes:
    block = channels * bits // 8
    body = struct.pack("<HHIIHH", audio_format, channels, rate, rate * block, block, bits)
    return b"fmt " + struct.pack("<I", len(body)) + body


def data_chunk(pcm: bytes) -> bytes:
    return b"data" + struct.pack("<I", len(pcm)) + pcm


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------

def test_fft_matches_naive_dft():
    rng = np.random.default_rng(0)
    x = rng.normal(size=16) + 1j * rng.normal(size=16)
    k = np.arange(16)
    dft = np.exp(-2j * np.pi * np.outer(k, k) / 16) @ x
    assert np.max(np.abs(fft(x) - dft)) < 1e-12


def test_fft_batched_against_numpy():
    x = np.random.default_rng(1).normal(size=(3, WINDOW))
    assert np.allclose(fft(x), np.fft.fft(x, axis=-1), atol=1e-9)


def test_fft_length_one_is_identity():
    assert np.array_equal(fft(np.array([2.5])), np.array([2.5 + 0j]))


def test_fft_rejects_non_power_of_two():
    with pytest.raises(SpectrumError):
        fft(np.zeros(12))


# ---------------------------------------------------------------------------
# Welch PSD
# ---------------------------------------------------------------------------

def test_welch_matches_scipy():
    samples = np.random.default_rng(2).uniform(-0.1, 0.1, size=RATE)
    report = welch_psd(AudioClip(RATE, samples))
    frequencies, expected = welch(samples, fs=RATE, window="hamming", nperseg=WINDOW, noverlap=WINDOW // 2,
                                  detrend=False, scaling="spectrum")
    assert np.allclose(report.frequencies, frequencies)
    assert np.max(np.abs(report.power - expected)) < 1e-6 * np.max(expected)
    assert report.segments == (RATE - WINDOW) // (WINDOW // 2) + 1


@pytest.mark.parametrize("segments", [1, 3, 8])
def test_integrated_psd_matches_windowed_energy(segments):
    samples = np.random.default_rng(segments).normal(scale=0.05, size=segments * WINDOW)
    report = welch_psd(AudioClip(RATE, samples), overlap=0.0)
    taper = get_window("hamming", WINDOW)
    frames = samples.reshape(segments, WINDOW) * taper
    expected = np.mean(WINDOW * np.sum(frames ** 2, axis=1)) / np.sum(taper) ** 2
    assert report.segments == segments
    assert np.sum(report.power) == pytest.approx(expected, rel=1e-9)


def test_integrated_psd_recovers_variance():
    samples = np.random.default_rng(3).normal(scale=0.02, size=64 * WINDOW)
    report = welch_psd(AudioClip(RATE, samples))
    taper = get_window("hamming", WINDOW)
    noise_bandwidth = WINDOW * np.sum(taper ** 2) / np.sum(taper) ** 2
    assert np.sum(report.power) / noise_bandwidth == pytest.approx(np.var(samples), rel=0.02)


def test_averaging_segments_shrinks_bin_scatter():
    rng = np.random.default_rng(4)
    spreads = []
    for segments in (1, 4, 16, 64):
        report = welch_psd(AudioClip(RATE, rng.normal(size=segments * WINDOW)), overlap=0.0)
        interior = report.power[1:-1]
        spread = np.std(interior) / np.mean(interior)
        assert spread * np.sqrt(segments) == pytest.approx(1.0, abs=0.15)
        spreads.append(spread)
    assert spreads == sorted(spreads, reverse=True)


@pytest.mark.parametrize("segments", [1, 2, 7])
@pytest.mark.parametrize("gain", [1e-3, 0.5, 3.0, 40.0])
def test_band_power_tracks_amplitude(segments, gain):
    samples = np.random.default_rng(5).uniform(-0.01, 0.01, size=WINDOW + (segments - 1) * (WINDOW // 2))
    base = welch_psd(AudioClip(RATE, samples))
    scaled = welch_psd(AudioClip(RATE, gain * samples))
    assert base.segments == segments
    assert band_power_db(scaled) - band_power_db(base) == pytest.approx(20.0 * np.log10(gain), abs=1e-9)


def test_bin_centred_tone_power():
    amplitude = 0.5
    report = welch_psd(tone(bin_center(TONE_BIN), amplitude, RATE, 2.0))
    peak = amplitude ** 2 / 2.0
    assert report.power[TONE_BIN] == pytest.approx(peak, rel=1e-9)
    assert report.power[TONE_BIN + 1] == pytest.approx(peak * SIDE_LOBE, rel=1e-9)
    lo, hi = report.frequencies[TONE_BIN - 1], report.frequencies[TONE_BIN + 1]
    analytic = (peak + 2.0 * peak * SIDE_LOBE) / 3.0
    assert abs(band_power_db(report, lo, hi) - 10.0 * np.log10(analytic / REFERENCE_POWER)) < 0.5


def test_peak_frequency_of_tone():
    report = welch_psd(tone(bin_center(TONE_BIN), 0.5, RATE, 1.0))
    assert peak_frequency(report) == pytest.approx(996.09375)


def test_reference_amplitude_tone_reads_zero_db():
    report = welch_psd(tone(bin_center(TONE_BIN), 1e-10, RATE, 1.0))
    assert bin_power_db(report)[TONE_BIN] == pytest.approx(0.0, abs=1e-6)


def test_amplitude_ratio_maps_to_200_db():
    loud = band_power_db(welch_psd(tone(bin_center(TONE_BIN), 1.0, RATE, 1.0)))
    faint = band_power_db(welch_psd(tone(bin_center(TONE_BIN), 1e-10, RATE, 1.0)))
    assert loud - faint == pytest.approx(200.0, abs=1e-6)


def test_silence_floors():
    report = welch_psd(AudioClip(RATE, np.zeros(RATE)))
    assert band_power_db(report) == SILENCE_DB
    assert np.all(bin_power_db(report) == SILENCE_DB)


def test_dc_stays_in_first_bins():
    report = welch_psd(AudioClip(RATE, np.full(WINDOW * 2, 0.3)))
    assert int(np.argmax(report.power)) == 0
    assert report.power[0] == pytest.approx(0.09)
    assert np.all(report.power[2:] < 1e-20)


def test_welch_needs_one_window():
    with pytest.raises(InsufficientDataError):
        welch_psd(AudioClip(RATE, np.zeros(WINDOW - 1)))


def test_welch_rejects_full_overlap():
    with pytest.raises(SpectrumError):
        welch_psd(AudioClip(RATE, np.zeros(WINDOW)), overlap=1.0)


def test_band_outside_spectrum():
    report = welch_psd(AudioClip(RATE, np.zeros(WINDOW)))
    with pytest.raises(SpectrumError):
        band_power(report, 30000.0, 40000.0)


def test_relative_to_reference():
    reference = band_power_db(welch_psd(reference_tone(RATE, 1.0)))
    half = band_power_db(welch_psd(tone(1000.0, 0.5, RATE, 1.0)))
    assert relative_to_reference_db(half, reference) == pytest.approx(20.0 * np.log10(0.5), abs=1e-6)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def test_wav_round_trip():
    clip = tone(440.0, 0.4, 16000, 0.25)
    decoded = read_wav(write_wav(clip))
    assert decoded.sample_rate == 16000
    assert decoded.samples.size == clip.samples.size
    assert np.max(np.abs(decoded.samples - clip.samples)) <= 0.5 / 32768.0 + 1e-12


def test_stereo_is_averaged():
    pcm = struct.pack("<4h", 1000, -2000, 3000, 3000)
    clip = read_wav(wav_bytes(fmt_chunk(channels=2) + data_chunk(pcm)))
    assert np.allclose(clip.samples, [-500.0 / 32768.0, 3000.0 / 32768.0])


def test_unknown_chunks_are_skipped_with_padding():
    extra = b"LIST" + struct.pack("<I", 3) + b"abc" + b"\x00"
    pcm = struct.pack("<2h", 16384, -16384)
    clip = read_wav(wav_bytes(fmt_chunk() + extra + data_chunk(pcm)))
    assert np.array_equal(clip.samples, [0.5, -0.5])


@pytest.mark.parametrize("data, chunk", [
    (b"RIFF", "RIFF"),
    (b"RIFX" + struct.pack("<I", 4) + b"WAVE", "RIFF"),
    (wav_bytes(fmt_chunk(audio_format=3) + data_chunk(b"\x00\x00")), "fmt "),
    (wav_bytes(fmt_chunk(bits=24) + data_chunk(b"\x00\x00\x00")), "fmt "),
    (wav_bytes(fmt_chunk(channels=3) + data_chunk(b"\x00" * 6)), "fmt "),
    (wav_bytes(data_chunk(b"\x00\x00") + fmt_chunk()), "data"),
    (wav_bytes(fmt_chunk()), "data"),
    (wav_bytes(fmt_chunk() + data_chunk(b"\x00\x00\x00")), "data"),
    (wav_bytes(fmt_chunk() + b"data" + struct.pack("<I", 100) + b"\x00\x00"), "data"),
    (wav_bytes(fmt_chunk() + b"da"), "header"),
])
def test_wav_errors_name_the_chunk(data, chunk):
    with pytest.raises(WavParseError) as info:
        read_wav(data)
    assert info.value.chunk == chunk
    assert f"chunk '{chunk}'" in str(info.value)


def test_clip_validation():
    with pytest.raises(AcousticsError):
        AudioClip(0, np.zeros(4))
    with pytest.raises(AcousticsError):
        AudioClip(RATE, np.array([0.0, np.nan]))


# ---------------------------------------------------------------------------
# Simulator-side metrics
# ---------------------------------------------------------------------------

def make_records(seconds: float, dt: float = 0.01, speeds=(0.1, 0.3)):
    records = []
    for step in range(1, int(round(seconds / dt)) + 1):
        joint = np.zeros(12)
        joint[:2] = [3.0, 4.0]
        records.append(TrajectoryRecord(
            time=step * dt,
            touchdown_speeds=list(speeds) if step % 10 == 0 else [],
            joint_acceleration=joint,
            base_ang_acceleration=np.array([0.6, 0.8]),
        ))
    return records


def test_penalty_metrics_over_window():
    metrics = sim_penalty_metrics(make_records(20.0))
    assert metrics.sample_count == 1000
    assert metrics.touchdown_count == 200
    assert metrics.contact_velocity == pytest.approx(0.2)
    assert metrics.joint_acceleration == pytest.approx(5.0)
    assert metrics.base_ang_acceleration == pytest.approx(1.0)
    assert set(metrics.to_dict()) == {"contact_velocity", "joint_acceleration", "base_ang_acceleration",
                                      "duration", "touchdown_count"}


def test_partitioned_windows_combine_to_whole():
    records = make_records(10.0)
    for record in records[:500]:
        if record.touchdown_speeds:
            record.touchdown_speeds = [0.5]
    whole = sim_penalty_metrics(records)
    parts = [sim_penalty_metrics(records, 5.0), sim_penalty_metrics(records, 5.0, start=5.0)]
    combined = combine_metrics(parts)
    assert combined.touchdown_count == whole.touchdown_count
    assert combined.sample_count == whole.sample_count
    assert combined.contact_velocity == pytest.approx(whole.contact_velocity)
    assert combined.joint_acceleration == pytest.approx(whole.joint_acceleration)


def test_no_touchdowns_gives_no_contact_velocity():
    metrics = sim_penalty_metrics(make_records(10.0, speeds=()))
    assert metrics.contact_velocity is None
    assert metrics.touchdown_count == 0
    combined = combine_metrics([metrics, metrics])
    assert combined.contact_velocity is None


def test_short_trajectory_is_insufficient():
    with pytest.raises(InsufficientDataError):
        sim_penalty_metrics(make_records(5.0))


def test_metric_argument_errors():
    with pytest.raises(AcousticsError):
        sim_penalty_metrics(make_records(1.0), duration=0.0)
    with pytest.raises(InsufficientDataError):
        combine_metrics([])


def test_penalty_rows_carry_units():
    metrics = PenaltyMetrics(0.1, 2.0, 3.0, 10.0, 5, 1000)
    assert metrics.rows()[0] == ("contact_velocity", 0.1, "m/s")


def test_impact_proxy_follows_kinetic_energy():
    record = TrajectoryRecord(time=0.5, touchdown_speeds=[0.2], joint_acceleration=np.zeros(12),
                              base_ang_acceleration=np.zeros(2))
    clip = impact_proxy_signal([record], rate=RATE, total_mass=2.2, duration=1.0)
    assert clip.samples.size == RATE + 1
    assert clip.samples[24000] == pytest.approx(0.5 * 0.55 * 0.04)
    doubled = impact_proxy_signal([TrajectoryRecord(0.5, [0.4], np.zeros(12), np.zeros(2))], rate=RATE, duration=1.0)
    assert doubled.samples[24000] == pytest.approx(4.0 * clip.samples[24000])
    assert np.count_nonzero(clip.samples) == 1


def test_impact_proxy_clips_to_full_scale():
    record = TrajectoryRecord(time=0.1, touchdown_speeds=[5.0], joint_acceleration=np.zeros(12),
                              base_ang_acceleration=np.zeros(2))
    clip = impact_proxy_signal([record], duration=0.2)
    assert clip.samples.max() == 1.0


def test_impact_proxy_warns_when_clipping(caplog):
    loud = TrajectoryRecord(time=0.1, touchdown_speeds=[5.0, 5.0], joint_acceleration=np.zeros(12),
                            base_ang_acceleration=np.zeros(2))
    soft = TrajectoryRecord(time=0.1, touchdown_speeds=[0.2], joint_acceleration=np.zeros(12),
                            base_ang_acceleration=np.zeros(2))
    with caplog.at_level(logging.WARNING, logger="acoustics"):
        impact_proxy_signal([soft], duration=0.2)
        assert not caplog.records
        impact_proxy_signal([loud], duration=0.2)
    assert len(caplog.records) == 1
    assert "peaks at 13.75" in caplog.text
    assert "1 of 9601 samples clipped" in caplog.text


def test_quiet_gait_proxy_is_quieter():
    soft = impact_proxy_signal(make_records(2.0, speeds=(0.05,)), duration=2.0)
    hard = impact_proxy_signal(make_records(2.0, speeds=(0.3,)), duration=2.0)
    assert band_power_db(welch_psd(hard)) - band_power_db(welch_psd(soft)) == pytest.approx(40.0 * np.log10(6.0), abs=1e-6)
