"""Deterministic synthetic cohorts with plantable signal, identity and confounds.

Every recording is shaped pink noise. Information is planted as narrowband
Gaussian-shaped spectral boosts so that each kind of information lives in its
own frequency band:

* class band: positive sessions only (``class_band_hz`` / ``class_gain_db``),
* signature bands: one per participant and modality, drawn from
  ``signature_range_hz`` (this is what sample-level splits leak),
* confound band: participants in one demographic category.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .audio_io import encode_wav
from .cohort import AGE_BINS, GENDERS, LABELS, MODALITIES, SampleRecord, dump_manifest, largest_remainder
from .errors import SpecError

DEFAULT_DEMOGRAPHICS = {
    "gender": {"male": 0.5, "female": 0.5},
    "age_bin": {"16-29": 0.25, "30-39": 0.25, "40-49": 0.2, "50-59": 0.15, "60-69": 0.1, "70+": 0.05},
    "language": {"en": 0.6, "it": 0.2, "es": 0.2},
}
START_TIMESTAMP = 1_600_000_000  # 2020-09-13
DAY = 86400
PEAK_LEVEL = 0.5


@dataclass(frozen=True)
class ConfoundSpec:
    axis: str
    category: str
    band_hz: float
    gain_db: float


@dataclass(frozen=True)
class CohortSpec:
    n_participants: int = 200
    pos_fraction: float = 0.5
    sessions_per_participant: tuple[int, int] = (1, 3)
    # label -> axis -> category -> proportion; a missing label uses the defaults
    demographics: Mapping[str, Mapping[str, Mapping[str, float]]] = field(default_factory=dict)
    class_band_hz: float = 1000.0
    class_gain_db: float = 12.0
    band_width_hz: float = 60.0
    participant_signature_gain_db: float = 0.0
    signature_range_hz: tuple[float, float] = (2000.0, 6500.0)
    confound: ConfoundSpec | None = None
    # positives' class gain ramps linearly to 0 dB over their sessions
    recovery: bool = False
    symptomatic_fraction: float = 0.5
    duration_s: float = 1.5
    sample_rate_hz: int = 16000
    window_days: float = 14.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def demographics_for(self, label: str) -> dict[str, dict[str, float]]:
        out = {axis: dict(props) for axis, props in DEFAULT_DEMOGRAPHICS.items()}
        for axis, props in self.demographics.get(label, {}).items():
            out[axis] = dict(props)
        return out

    def validate(self) -> None:
        nyquist = self.sample_rate_hz / 2
        if self.n_participants < 2:
            raise SpecError("n_participants", "need at least 2 participants")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise SpecError("pos_fraction", "must lie in [0, 1]")
        if not 0.0 <= self.symptomatic_fraction <= 1.0:
            raise SpecError("symptomatic_fraction", "must lie in [0, 1]")
        lo, hi = self.sessions_per_participant
        if not 1 <= lo <= hi:
            raise SpecError("sessions_per_participant", "need 1 <= min <= max")
        if self.sample_rate_hz <= 0:
            raise SpecError("sample_rate_hz", "must be positive")
        if self.duration_s <= 0:
            raise SpecError("duration_s", "must be positive")
        if self.band_width_hz <= 0:
            raise SpecError("band_width_hz", "must be positive")
        if not 0 < self.class_band_hz < nyquist:
            raise SpecError("class_band_hz", f"must lie inside (0, {nyquist:g}) Hz")
        s_lo, s_hi = self.signature_range_hz
        if not 0 < s_lo <= s_hi < nyquist:
            raise SpecError("signature_range_hz", f"must lie inside (0, {nyquist:g}) Hz")
        if self.confound is not None:
            if not 0 < self.confound.band_hz < nyquist:
                raise SpecError("confound.band_hz", f"must lie inside (0, {nyquist:g}) Hz")
            if self.confound.axis not in DEFAULT_DEMOGRAPHICS:
                raise SpecError("confound.axis", "must be gender, age_bin or language")
        for label, axes in self.demographics.items():
            if label not in LABELS:
                raise SpecError("demographics", f"unknown label {label!r}")
            for axis, props in axes.items():
                if axis not in DEFAULT_DEMOGRAPHICS:
                    raise SpecError(f"demographics.{label}.{axis}", "unknown axis")
                allowed = {"gender": GENDERS, "age_bin": AGE_BINS}.get(axis)
                if allowed and set(props) - set(allowed):
                    raise SpecError(f"demographics.{label}.{axis}", f"unknown categories {sorted(set(props) - set(allowed))}")
                if abs(sum(props.values()) - 1.0) > 1e-6 or min(props.values()) < 0:
                    raise SpecError(f"demographics.{label}.{axis}", "proportions must sum to 1")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "CohortSpec":
        known = {f.name for f in fields(cls)}
        for key in obj:
            if key not in known:
                raise SpecError(key, "unknown field")
        kw = dict(obj)
        try:
            if kw.get("confound") is not None:
                kw["confound"] = ConfoundSpec(**kw["confound"])
            for key in ("sessions_per_participant", "signature_range_hz"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            return cls(**kw)
        except TypeError as exc:
            raise SpecError("confound", str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# signal synthesis


def _band_gain(freqs: np.ndarray, center: float, gain_db: float, width: float) -> np.ndarray:
    peak = 10.0 ** (gain_db / 20.0)
    return 1.0 + (peak - 1.0) * np.exp(-0.5 * ((freqs - center) / width) ** 2)


def _envelope(modality: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if modality == "breathing":
        rate = rng.uniform(0.3, 0.6)
        return 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)) ** 2
    if modality == "cough":
        env = np.full(n, 0.15)
        for onset in np.sort(rng.uniform(0.0, max(t[-1] - 0.2, 0.01), size=2)):
            env += np.where(t >= onset, np.exp(-(t - onset) / 0.12), 0.0)
        return env
    # voice: syllable-rate modulation
    rate = rng.uniform(3.0, 5.0)
    return 0.6 + 0.4 * np.abs(np.sin(np.pi * rate * t + rng.uniform(0, np.pi)))


_TILT = {"breathing": 1.2, "cough": 0.8, "voice": 1.0}


def synthesize(
    modality: str,
    rng: np.random.Generator,
    bands: list[tuple[float, float]],
    duration_s: float,
    sample_rate_hz: int,
    band_width_hz: float,
) -> np.ndarray:
    """One recording: colored noise, narrowband boosts ``(center_hz, gain_db)``, envelope, peak 0.5."""
    n = int(round(duration_s * sample_rate_hz))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate_hz)
    shape = np.maximum(freqs, 50.0) ** (-_TILT[modality] / 2.0)
    for center, gain_db in bands:
        if gain_db != 0.0:
            shape = shape * _band_gain(freqs, center, gain_db, band_width_hz)
    x = np.fft.irfft(spectrum * shape, n=n) * _envelope(modality, n, sample_rate_hz, rng)
    return x * (PEAK_LEVEL / np.max(np.abs(x)))


# --------------------------------------------------------------------------
# cohort generation


def _assign_categories(n: int, props: Mapping[str, float], rng: np.random.Generator) -> list[str]:
    cats = sorted(props)
    counts = largest_remainder(n, [props[c] for c in cats])
    pool = [c for c, k in zip(cats, counts) for _ in range(k)]
    return [pool[i] for i in rng.permutation(n)]


@dataclass(frozen=True)
class _Participant:
    pid: str
    index: int
    label: str
    gender: str
    age_bin: str
    language: str


def plan_participants(spec: CohortSpec) -> list[_Participant]:
    """Participant labels and demographics with exact per-cell marginals."""
    n_pos = int(round(spec.n_participants * spec.pos_fraction))
    counts = {"positive": n_pos, "negative": spec.n_participants - n_pos}
    out: list[_Participant] = []
    idx = 0
    for k, label in enumerate(LABELS):
        n = counts[label]
        demo = spec.demographics_for(label)
        cols = {axis: _assign_categories(n, demo[axis], np.random.default_rng([spec.seed, 0, k, j]))
                for j, axis in enumerate(("gender", "age_bin", "language"))}
        for i in range(n):
            out.append(_Participant(f"p{idx:04d}", idx, label, cols["gender"][i], cols["age_bin"][i], cols["language"][i]))
            idx += 1
    return out


def _participant_records(spec: CohortSpec, part: _Participant):
    """Records plus audio for one participant, from its own derived seed."""
    rng = np.random.default_rng([spec.seed, 1, part.index])
    lo, hi = spec.sessions_per_participant
    n_sessions = int(rng.integers(lo, hi + 1))
    start = START_TIMESTAMP + int(rng.integers(0, 60 * DAY))
    offsets = np.sort(rng.choice(int(spec.window_days * DAY), size=n_sessions, replace=False))
    signatures = rng.uniform(*spec.signature_range_hz, size=len(MODALITIES))
    positive = part.label == "positive"
    out = []
    for s in range(n_sessions):
        class_gain = spec.class_gain_db if positive else 0.0
        if positive and spec.recovery and n_sessions > 1:
            class_gain *= 1.0 - s / (n_sessions - 1)
        symptomatic = bool(rng.random() < spec.symptomatic_fraction)
        for m, modality in enumerate(MODALITIES):
            bands = [(spec.class_band_hz, class_gain), (signatures[m], spec.participant_signature_gain_db)]
            c = spec.confound
            if c is not None and getattr(part, c.axis) == c.category:
                bands.append((c.band_hz, c.gain_db))
            audio = synthesize(modality, np.random.default_rng([spec.seed, 2, part.index, s, m]), bands,
                               spec.duration_s, spec.sample_rate_hz, spec.band_width_hz)
            sid = f"s{s:02d}"
            rec = SampleRecord(
                participant_id=part.pid, session_id=sid, modality=modality, label=part.label,
                age_bin=part.age_bin, gender=part.gender, language=part.language, symptomatic=symptomatic,
                timestamp=float(start + offsets[s]), audio_path=f"data/{part.pid}/{sid}/{modality}.wav",
            )
            out.append((rec, audio))
    return out


def generate(spec: CohortSpec, out_dir) -> list[SampleRecord]:
    """Write ``manifest.jsonl`` and ``data/<participant>/<session>/<modality>.wav``."""
    spec.validate()
    out_dir = Path(out_dir)
    records: list[SampleRecord] = []
    for part in plan_participants(spec):
        for rec, audio in _participant_records(spec, part):
            path = out_dir / rec.audio_path
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(encode_wav(audio, spec.sample_rate_hz))
            records.append(rec)
    (out_dir / "manifest.jsonl").write_text(dump_manifest(records))
    return records


def load_spec(path) -> CohortSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError("<file>", f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise SpecError("<file>", "expected a JSON object")
    return CohortSpec.from_dict(obj)
