"""WAV decoding, band-limited resampling and a basic recording quality gate."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from math import gcd
from pathlib import Path

import numpy as np

from .errors import DecodeError, UnsupportedFormat

CANONICAL_RATE_HZ = 16000

KAISER_BETA = 8.6
TAPS_PER_PHASE = 32

DEFAULT_MIN_DURATION_S = 1.0
DEFAULT_CLIP_FRACTION_MAX = 0.05
DEFAULT_SILENCE_RMS_FLOOR = 1e-4
CLIP_LEVEL = 0.999

_FORMAT_PCM = 1
_FORMAT_FLOAT = 3
_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_path: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if samples.size and (not np.all(np.isfinite(samples)) or np.max(np.abs(samples)) > 1.0):
            raise ValueError("samples must be finite and within [-1, 1]")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


class Reason(str, Enum):
    ok = "ok"
    too_short = "too_short"
    clipped = "clipped"
    silent = "silent"


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    reason: Reason


# --------------------------------------------------------------------------
# RIFF/WAVE


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, source_path: str = "") -> AudioClip:
    """Decode PCM16 or float32 WAV bytes (mono or stereo) into a mono clip."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("missing RIFF/WAVE header")
    fmt = None
    raw = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            if fmt[0] == _FORMAT_EXTENSIBLE and len(body) >= 26:
                # sub-format GUID starts with the plain format tag
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            raw = body
    if fmt is None or raw is None:
        raise DecodeError("missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if rate <= 0 or channels <= 0:
        raise DecodeError("invalid sample rate or channel count")
    if channels > 2:
        raise UnsupportedFormat(f"{channels} channels")
    if tag == _FORMAT_PCM and bits == 16:
        frames = np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        frames = np.frombuffer(raw[: len(raw) // 4 * 4], dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(frames)):
            raise DecodeError("non-finite float samples")
        frames = np.clip(frames, -1.0, 1.0)
    else:
        raise UnsupportedFormat(f"format tag {tag} with {bits} bits per sample")
    frames = frames[: len(frames) // channels * channels].reshape(-1, channels)
    if len(frames) == 0:
        raise DecodeError("no samples")
    mono = frames.mean(axis=1) if channels == 2 else frames[:, 0]
    return AudioClip(mono, rate, source_path)


def read_wav(path) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), str(path))


def encode_wav(samples, sample_rate_hz: int, float32: bool = False) -> bytes:
    """Encode one or more channels (shape (n,) or (n, channels)) as WAV bytes."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if float32:
        payload = x.astype("<f4").tobytes()
        tag, bits = _FORMAT_FLOAT, 32
    else:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = q.tobytes()
        tag, bits = _FORMAT_PCM, 16
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate_hz, sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


# --------------------------------------------------------------------------
# resampling


@lru_cache(maxsize=32)
def _phase_table(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc taps for each of the ``up`` fractional phases.

    Row ``r`` holds the weights applied to input samples
    ``floor(t) - 15 .. floor(t) + 16`` when the output instant ``t`` sits
    ``r / up`` of a sample past ``floor(t)``.
    """
    half = TAPS_PER_PHASE // 2
    cutoff = min(1.0, up / down)
    frac = np.arange(up)[:, None] / up
    k = np.arange(-half + 1, half + 1)[None, :]
    tau = frac - k
    window = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (tau / half) ** 2, 0.0, None))) / np.i0(KAISER_BETA)
    taps = cutoff * np.sinc(cutoff * tau) * window
    return taps / taps.sum(axis=1, keepdims=True)


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Polyphase windowed-sinc resampling to ``target_hz``."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    src = clip.sample_rate_hz
    if target_hz == src:
        return clip
    g = gcd(src, target_hz)
    up, down = target_hz // g, src // g
    n_out = int(round(len(clip) * target_hz / src))
    taps = _phase_table(up, down)
    half = TAPS_PER_PHASE // 2
    # hold the edge samples rather than zero-pad: no step at the clip boundaries
    x = clip.samples
    padded = np.concatenate([np.full(half, x[0] if len(x) else 0.0), x, np.full(half + 1, x[-1] if len(x) else 0.0)])
    pos = np.arange(n_out, dtype=np.int64) * down
    base = pos // up
    phase = pos % up
    out = np.empty(n_out)
    chunk = 8192
    offsets = np.arange(-half + 1, half + 1)
    for s in range(0, n_out, chunk):
        b = base[s : s + chunk, None] + offsets[None, :] + half
        out[s : s + chunk] = np.einsum("ij,ij->i", padded[b], taps[phase[s : s + chunk]])
    if up > down and len(x):
        # Upsampling has nothing to anti-alias, so outputs whose kernel reaches
        # into the padding use linear interpolation: the padding's kink would
        # otherwise ring well above the signal's true crest.
        edge = (base < half - 1) | (base > len(x) - 1 - half)
        out[edge] = np.interp(pos[edge] / up, np.arange(len(x)), x)
    # tiny overshoot near full scale would break the clip invariant
    return AudioClip(np.clip(out, -1.0, 1.0), target_hz, clip.source_path)


# --------------------------------------------------------------------------
# quality gate


def quality_gate(
    clip: AudioClip,
    min_duration_s: float = DEFAULT_MIN_DURATION_S,
    clip_fraction_max: float = DEFAULT_CLIP_FRACTION_MAX,
    silence_rms_floor: float = DEFAULT_SILENCE_RMS_FLOOR,
) -> QualityVerdict:
    """Checks run in a fixed order: too_short, clipped, silent."""
    if clip.duration_s < min_duration_s:
        return QualityVerdict(False, Reason.too_short)
    if np.mean(np.abs(clip.samples) >= CLIP_LEVEL) > clip_fraction_max:
        return QualityVerdict(False, Reason.clipped)
    if np.sqrt(np.mean(clip.samples**2)) < silence_rms_floor:
        return QualityVerdict(False, Reason.silent)
    return QualityVerdict(True, Reason.ok)
