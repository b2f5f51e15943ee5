"""Log-mel spectrogram front end and fixed-size model windows."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .audio_io import AudioClip
from .errors import DegenerateBand, ShapeMismatch, TooShort

MODALITY_CODES = {"breathing": 0, "cough": 1, "voice": 2}
DEFAULT_T_FRAMES = 96


@dataclass(frozen=True)
class SpectrogramConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 64
    fmin_hz: float = 125.0
    fmax_hz: float = 7500.0
    log_floor: float = 1e-10

    def win_length(self, sample_rate_hz: int) -> int:
        return int(round(self.window_ms * sample_rate_hz / 1000.0))

    def hop_length(self, sample_rate_hz: int) -> int:
        return int(round(self.hop_ms * sample_rate_hz / 1000.0))

    def validate(self, sample_rate_hz: int) -> None:
        if self.hop_ms > self.window_ms:
            raise ValueError("hop_ms must not exceed window_ms")
        if self.n_fft & (self.n_fft - 1) or self.n_fft <= 0:
            raise ValueError("n_fft must be a power of two")
        if self.n_fft < self.win_length(sample_rate_hz):
            raise ValueError("n_fft shorter than the analysis window")
        if not 0 <= self.fmin_hz < self.fmax_hz <= sample_rate_hz / 2:
            raise ValueError("need 0 <= fmin_hz < fmax_hz <= Nyquist")
        if self.n_mels <= 0 or self.log_floor <= 0:
            raise ValueError("n_mels and log_floor must be positive")


@dataclass(frozen=True, eq=False)
class LogMelSpectrogram:
    values: np.ndarray  # (frames, n_mels), natural log
    config: SpectrogramConfig

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


class WindowPolicy(str, Enum):
    center_crop_or_pad = "center_crop_or_pad"
    tiled_50pct_overlap = "tiled_50pct_overlap"


@dataclass(frozen=True, eq=False)
class FeatureWindow:
    values: np.ndarray  # (t_frames, n_mels), z-normalized
    modality: str


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def stft_power(clip: AudioClip, config: SpectrogramConfig = SpectrogramConfig(), window: str = "hann") -> np.ndarray:
    """Framed power spectra, shape (frames, n_fft // 2 + 1).

    Power is ``|rfft|^2 / n_fft`` so that, for a single frame, the one-sided
    bins with interior bins doubled sum to the frame's energy. ``window`` is
    ``"hann"`` (periodic) or ``"rect"``.
    """
    sr = clip.sample_rate_hz
    config.validate(sr)
    win = config.win_length(sr)
    hop = config.hop_length(sr)
    x = clip.samples
    if len(x) < win:
        raise TooShort(f"clip has {len(x)} samples, window needs {win}")
    n_frames = 1 + (len(x) - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx]
    if window == "hann":
        frames = frames * np.hanning(win + 1)[:-1]
    elif window != "rect":
        raise ValueError(f"unknown window {window!r}")
    spec = np.fft.rfft(frames, n=config.n_fft, axis=1)
    return (spec.real**2 + spec.imag**2) / config.n_fft


def mel_filterbank(sample_rate_hz: int, n_fft: int, n_mels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Triangular filters (peak 1) with centers equally spaced in mel."""
    if not 0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2:
        raise ValueError("need 0 <= fmin_hz < fmax_hz <= Nyquist")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (center - lo)
    falling = (hi - bins[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if len(empty):
        raise DegenerateBand(f"{len(empty)} empty mel filters (first at index {empty[0]}); use fewer mels or a larger n_fft")
    return fb


def filter_centers_hz(sample_rate_hz: int, n_mels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))[1:-1]


def log_mel(power: np.ndarray, filterbank: np.ndarray, log_floor: float = 1e-10, config: SpectrogramConfig | None = None) -> LogMelSpectrogram:
    power = np.asarray(power, dtype=np.float64)
    if power.ndim != 2 or power.shape[1] != filterbank.shape[1]:
        raise ShapeMismatch(f"power {power.shape} incompatible with filterbank {filterbank.shape}")
    mel = power @ filterbank.T
    if config is None:
        config = SpectrogramConfig(n_mels=filterbank.shape[0], log_floor=log_floor)
    return LogMelSpectrogram(np.log(np.maximum(mel, log_floor)), config)


def log_mel_spectrogram(clip: AudioClip, config: SpectrogramConfig = SpectrogramConfig()) -> LogMelSpectrogram:
    fb = mel_filterbank(clip.sample_rate_hz, config.n_fft, config.n_mels, config.fmin_hz, config.fmax_hz)
    return log_mel(stft_power(clip, config), fb, config.log_floor, config)


def _znorm(block: np.ndarray) -> np.ndarray:
    mean = block.mean()
    std = block.std()
    if std < 1e-12:
        return np.zeros_like(block)
    return (block - mean) / std


def _fit(values: np.ndarray, t_frames: int) -> np.ndarray:
    """Center crop, or pad by replicating edge frames (extra frame goes to the end)."""
    n = len(values)
    if n >= t_frames:
        start = (n - t_frames) // 2
        return values[start : start + t_frames]
    lead = (t_frames - n) // 2
    return np.pad(values, ((lead, t_frames - n - lead), (0, 0)), mode="edge")


def window_offsets(n_frames: int, t_frames: int, policy: WindowPolicy | str) -> list[int]:
    """Start frames of each window; negative means the single window is padded."""
    policy = WindowPolicy(policy)
    if t_frames <= 0:
        raise ValueError("t_frames must be positive")
    if n_frames < t_frames:
        return [-((t_frames - n_frames) // 2)]
    if policy is WindowPolicy.center_crop_or_pad:
        return [(n_frames - t_frames) // 2]
    hop = max(1, t_frames // 2)
    return list(range(0, n_frames - t_frames + 1, hop))


def windows(spec: LogMelSpectrogram | np.ndarray, t_frames: int = DEFAULT_T_FRAMES,
            policy: WindowPolicy | str = WindowPolicy.center_crop_or_pad, modality: str = "breathing") -> list[FeatureWindow]:
    values = np.asarray(getattr(spec, "values", spec), dtype=np.float64)
    if len(values) < t_frames:
        return [FeatureWindow(_znorm(_fit(values, t_frames)), modality)]
    return [FeatureWindow(_znorm(values[o : o + t_frames]), modality) for o in window_offsets(len(values), t_frames, policy)]


# --------------------------------------------------------------------------
# LMEL feature files

_LMEL_MAGIC = b"LMEL"
_LMEL_VERSION = 1


def encode_lmel(values: np.ndarray, modality: str) -> bytes:
    values = np.asarray(values, dtype="<f4")
    frames, n_mels = values.shape
    header = _LMEL_MAGIC + struct.pack("<HIIB", _LMEL_VERSION, frames, n_mels, MODALITY_CODES[modality])
    return header + values.tobytes(order="C")


def decode_lmel(data: bytes) -> tuple[np.ndarray, str]:
    if data[:4] != _LMEL_MAGIC:
        raise ValueError("not an LMEL feature file")
    version, frames, n_mels, code = struct.unpack_from("<HIIB", data, 4)
    if version != _LMEL_VERSION:
        raise ValueError(f"unsupported LMEL version {version}")
    modality = {v: k for k, v in MODALITY_CODES.items()}[code]
    values = np.frombuffer(data, dtype="<f4", count=frames * n_mels, offset=15).reshape(frames, n_mels)
    return values.astype(np.float64), modality
