"""Waveform handling and the log-Mel spectrogram front end.

A clip is reduced to an M x N matrix of log mel-band energies: Hann-windowed
power STFT, triangular mel filterbank projection, natural log with a small
floor, and a fixed number of time frames (trailing crop or edge padding).
All functions here are pure and deterministic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, CorruptionError, FormatError, NumericError

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_FFT = 1024
DEFAULT_HOP = 512
DEFAULT_MEL_BINS = 128
DEFAULT_FRAMES = 312
LOG_EPS = 1e-10


@dataclass
class Waveform:
    """Mono audio clip with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ContractError("Waveform: samples must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("Waveform: non-finite samples")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ContractError("Waveform: samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ContractError("Waveform: sample rate must be positive")

    def __len__(self):
        return self.samples.size


@dataclass
class MelFilterbank:
    """Triangular mel filters sampled on FFT bin frequencies, unit peak per row."""

    matrix: np.ndarray               # [M, n_fft//2 + 1]
    mel_centers_hz: np.ndarray       # M + 2 band edge/centre frequencies
    n_fft: int
    sample_rate: int
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.matrix.shape[0]


@dataclass
class SpectralFeature:
    """M x N feature matrix; kind is one of log_mel, temporal, enhanced."""

    data: np.ndarray
    kind: str
    clip_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ContractError(f"SpectralFeature: need a matrix, got shape {self.data.shape}")
        if self.kind not in ("log_mel", "temporal", "enhanced"):
            raise ContractError(f"SpectralFeature: unknown kind {self.kind!r}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("SpectralFeature: non-finite entries")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, mono, PCM 16-bit or IEEE float 32-bit)

_PCM = 1
_IEEE_FLOAT = 3


def load_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV file; PCM samples are scaled by 1/32768."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise CorruptionError(f"{path}: truncated {cid.decode('latin1')} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise CorruptionError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise CorruptionError(f"{path}: short fmt chunk")

    audio_format, channels, sample_rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format == 0xFFFE and len(fmt) >= 40:  # WAVE_FORMAT_EXTENSIBLE
        (audio_format,) = struct.unpack_from("<H", fmt, 24)
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {channels} channels")
    if audio_format == _PCM and bits == 16:
        raw = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == _IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(data[:len(data) - len(data) % 4], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported codec (format={audio_format}, bits={bits})")
    if samples.size == 0:
        raise CorruptionError(f"{path}: empty data chunk")
    return Waveform(samples, sample_rate=sample_rate, source_id=str(path))


def write_wav(path, waveform: Waveform, fmt: str = "pcm16"):
    """Write a mono WAV file; pcm16 rounds samples * 32768 into int16."""
    if fmt == "pcm16":
        ints = np.clip(np.rint(waveform.samples * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        audio_format, bits = _PCM, 16
    elif fmt == "float32":
        payload = waveform.samples.astype("<f4").tobytes()
        audio_format, bits = _IEEE_FLOAT, 32
    else:
        raise ContractError(f"write_wav: unknown format {fmt!r}")
    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, audio_format, 1, waveform.sample_rate,
        waveform.sample_rate * block_align, block_align, bits,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


# ---------------------------------------------------------------------------
# spectrogram


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_power(x: Waveform, n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP) -> np.ndarray:
    """Power spectrogram [n_fft//2 + 1, frames]; frame t covers samples [t*hop, t*hop + n_fft)."""
    if hop < 1 or n_fft < 2:
        raise ContractError(f"stft_power: invalid n_fft={n_fft}, hop={hop}")
    samples = x.samples
    if samples.size < n_fft:
        raise ContractError(
            f"stft_power: clip of {samples.size} samples shorter than one {n_fft}-sample frame"
        )
    n_frames = (samples.size - n_fft) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = samples[idx] * hann_window(n_fft)[None, :]
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = DEFAULT_MEL_BINS, n_fft: int = DEFAULT_N_FFT,
                   sample_rate: int = DEFAULT_SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    """Build triangular filters with centers uniformly spaced on the mel scale."""
    if f_max is None:
        f_max = sample_rate / 2.0
    if not (0 <= f_min < f_max <= sample_rate / 2.0):
        raise ConfigError(f"mel_filterbank: need 0 <= f_min < f_max <= Nyquist, got [{f_min}, {f_max}]")
    if n_mels < 1:
        raise ConfigError(f"mel_filterbank: n_mels must be >= 1, got {n_mels}")

    points_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    matrix = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        left, center, right = points_hz[m], points_hz[m + 1], points_hz[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        matrix[m] = np.maximum(0.0, np.minimum(rising, falling))
        peak = matrix[m].max()
        if peak <= 0.0:
            raise ConfigError(
                f"mel_filterbank: filter {m} has no support at this FFT resolution; reduce n_mels"
            )
        matrix[m] /= peak
    return MelFilterbank(matrix, points_hz, n_fft, sample_rate, f_min, f_max)


def fit_frames(feature: np.ndarray, n_frames: int) -> np.ndarray:
    """Crop trailing columns, or repeat the last column, to hit exactly n_frames."""
    have = feature.shape[1]
    if have >= n_frames:
        return feature[:, :n_frames]
    pad = np.repeat(feature[:, -1:], n_frames - have, axis=1)
    return np.concatenate([feature, pad], axis=1)


def log_mel(x: Waveform, fb: MelFilterbank, n_fft: int = DEFAULT_N_FFT,
            hop: int = DEFAULT_HOP, n_frames: int = DEFAULT_FRAMES) -> SpectralFeature:
    """Log mel-band energies ln(FB . power + eps), fixed to n_frames columns."""
    power = stft_power(x, n_fft=n_fft, hop=hop)
    mel = fb.matrix @ power
    feature = np.log(mel + LOG_EPS)
    return SpectralFeature(fit_frames(feature, n_frames), kind="log_mel", clip_id=x.source_id)
