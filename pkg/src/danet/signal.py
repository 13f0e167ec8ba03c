"""Waveform I/O and the STFT front-end.

All spectrograms use a periodic square-root Hann window for both analysis
and synthesis. With hop = window_len / 4 the squared window overlap-adds to
a constant, which is what makes ``istft(stft(x))`` an identity on interior
samples.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 8000
WINDOW_LEN = 256  # 32 ms at 8 kHz
HOP = 64  # 8 ms at 8 kHz
LOG_FLOOR = 1e-8


class SignalError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("waveform must be one-dimensional (mono)")
        if self.sample_rate <= 0:
            raise SignalError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    bins: np.ndarray  # F x T complex
    hop: int
    window_len: int
    sample_rate: int = SAMPLE_RATE

    @property
    def n_freq(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]

    @property
    def padded_length(self) -> int:
        return (self.n_frames - 1) * self.hop + self.window_len

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def phase(self) -> np.ndarray:
        return np.angle(self.bins)


@dataclass
class FeatureMatrix:
    values: np.ndarray  # F x T
    mean: np.ndarray  # F
    std: np.ndarray  # F

    @property
    def norm_stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.std


def sqrt_hann(window_len: int) -> np.ndarray:
    n = np.arange(window_len)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_len))


def n_frames_for(n_samples: int, window_len: int = WINDOW_LEN, hop: int = HOP) -> int:
    return int(np.ceil((n_samples - window_len) / hop)) + 1


def _check_geometry(window_len: int, hop: int):
    if window_len < 2 or window_len & (window_len - 1):
        raise SignalError(f"window length must be a power of two, got {window_len}")
    if hop <= 0 or window_len % hop:
        raise SignalError(f"hop {hop} must divide window length {window_len}")


def cola_envelope(n_frames: int, window_len: int = WINDOW_LEN, hop: int = HOP) -> np.ndarray:
    """Overlap-added squared synthesis window over the padded signal."""
    win_sq = sqrt_hann(window_len) ** 2
    env = np.zeros((n_frames - 1) * hop + window_len)
    for t in range(n_frames):
        env[t * hop:t * hop + window_len] += win_sq
    return env


def stft(w: Waveform, window_len: int = WINDOW_LEN, hop: int = HOP) -> ComplexSpectrogram:
    _check_geometry(window_len, hop)
    x = w.samples
    if len(x) < window_len:
        raise SignalError(f"signal too short: {len(x)} samples < window of {window_len}")
    n_frames = n_frames_for(len(x), window_len, hop)
    padded = np.zeros((n_frames - 1) * hop + window_len)
    padded[:len(x)] = x
    idx = np.arange(window_len)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * sqrt_hann(window_len)
    bins = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(bins, hop, window_len, w.sample_rate)


def istft(s: ComplexSpectrogram) -> Waveform:
    """Overlap-add resynthesis; returns the padded length ``(T-1)*hop + window_len``.

    The overlap-added squared window is divided out. It equals the COLA
    constant on interior samples; at the edges the true envelope is used
    (except where it vanishes) so that partially covered samples are not
    attenuated.
    """
    if s.n_frames == 0:
        raise SignalError("cannot invert a spectrogram with zero frames")
    _check_geometry(s.window_len, s.hop)
    if s.n_freq != s.window_len // 2 + 1:
        raise SignalError(
            f"spectrogram has {s.n_freq} rows, expected {s.window_len // 2 + 1}")
    win = sqrt_hann(s.window_len)
    frames = np.fft.irfft(s.bins.T, n=s.window_len, axis=1) * win
    out = np.zeros(s.padded_length)
    for t in range(s.n_frames):
        out[t * s.hop:t * s.hop + s.window_len] += frames[t]
    env = cola_envelope(s.n_frames, s.window_len, s.hop)
    nz = env > 1e-8 * env.max()
    out[nz] /= env[nz]
    return Waveform(out, s.sample_rate)


def log_magnitude(s: ComplexSpectrogram | np.ndarray) -> np.ndarray:
    mag = s.magnitude() if isinstance(s, ComplexSpectrogram) else np.abs(s)
    return np.log(mag + LOG_FLOOR)


def log_magnitude_features(s, stats=None) -> FeatureMatrix:
    """Per-frequency normalized log magnitude.

    When ``stats`` (mean, std per frequency row) is omitted it is computed
    from ``s`` itself; at test time pass the frozen training statistics.
    """
    raw = log_magnitude(s)
    if stats is None:
        mean = raw.mean(axis=1)
        std = raw.std(axis=1)
    else:
        mean, std = (np.asarray(a, dtype=np.float64) for a in stats)
        if mean.shape != (raw.shape[0],) or std.shape != (raw.shape[0],):
            raise SignalError(
                f"normalization stats must have {raw.shape[0]} entries, got {mean.shape}")
    if np.any(std <= 0):
        bad = int(np.flatnonzero(std <= 0)[0])
        raise SignalError(f"degenerate frequency band: row {bad} has zero variance")
    values = (raw - mean[:, None]) / std[:, None]
    return FeatureMatrix(values, mean, std)


def accumulate_norm_stats(spectrograms) -> tuple[np.ndarray, np.ndarray]:
    """Global per-frequency mean/std of log magnitude over many spectrograms."""
    total = None
    total_sq = None
    count = 0
    for s in spectrograms:
        raw = log_magnitude(s)
        if total is None:
            total = np.zeros(raw.shape[0])
            total_sq = np.zeros(raw.shape[0])
        total += raw.sum(axis=1)
        total_sq += (raw ** 2).sum(axis=1)
        count += raw.shape[1]
    if count == 0:
        raise SignalError("no spectrograms to compute statistics from")
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    return mean, np.sqrt(var)


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise SignalError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise SignalError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise SignalError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise SignalError(
            f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resample first)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform):
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(q.tobytes())
