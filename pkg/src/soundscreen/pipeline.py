"""Glue between recordings on disk, feature files, the network and scored sessions."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import net
from .audio_io import QualityVerdict, quality_gate, read_wav, resample
from .cohort import SampleRecord, SplitAssignment
from .evaluation import ScoredSession
from .features import SpectrogramConfig, WindowPolicy, decode_lmel, log_mel_spectrogram, windows

MODALITIES = net.MODALITIES


@dataclass(frozen=True)
class IndexEntry:
    record: SampleRecord
    feature_path: str  # relative to the index file's directory
    frames: int

    def to_json(self) -> str:
        return json.dumps({**asdict(self.record), "feature_path": self.feature_path, "frames": self.frames}, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "IndexEntry":
        obj = dict(obj)
        path = obj.pop("feature_path")
        frames = obj.pop("frames")
        return cls(SampleRecord(**obj), path, frames)


def featurize_record(
    record: SampleRecord,
    base_dir,
    spec_cfg: SpectrogramConfig = SpectrogramConfig(),
    sample_rate_hz: int = 16000,
    gate: dict | None = None,
) -> tuple[QualityVerdict, np.ndarray | None]:
    clip = resample(read_wav(Path(base_dir) / record.audio_path), sample_rate_hz)
    verdict = quality_gate(clip, **(gate or {}))
    if not verdict.accepted:
        return verdict, None
    return verdict, log_mel_spectrogram(clip, spec_cfg).values.astype(np.float32)


def load_index(path) -> tuple[list[IndexEntry], Path]:
    path = Path(path)
    entries = [IndexEntry.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
    return entries, path.parent


class FeatureStore:
    """Lazily loads LMEL files referenced by an index and caches the arrays."""

    def __init__(self, entries: Sequence[IndexEntry], base_dir):
        self.entries = list(entries)
        self.base_dir = Path(base_dir)
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_index(cls, path) -> "FeatureStore":
        return cls(*load_index(path))

    def values(self, entry: IndexEntry) -> np.ndarray:
        if entry.feature_path not in self._cache:
            values, _ = decode_lmel((self.base_dir / entry.feature_path).read_bytes())
            self._cache[entry.feature_path] = values
        return self._cache[entry.feature_path]

    def sessions(self, split: SplitAssignment | None = None, set_name: str | None = None,
                 modalities: Iterable[str] = MODALITIES, symptomatic: bool | None = None):
        """Entries grouped by (participant, session), in sorted key order."""
        modalities = set(modalities)
        grouped: dict[tuple[str, str], list[IndexEntry]] = defaultdict(list)
        for e in self.entries:
            r = e.record
            if r.modality not in modalities:
                continue
            if split is not None and set_name is not None and split.set_of(r.participant_id, r.session_id) != set_name:
                continue
            if symptomatic is not None and r.symptomatic != symptomatic:
                continue
            grouped[(r.participant_id, r.session_id)].append(e)
        return dict(sorted(grouped.items()))

    def dataset(self, sessions, t_frames: int) -> net.Dataset:
        """One center-cropped window per modality per session."""
        keys = list(sessions)
        n_mels = None
        x = None
        presence = np.zeros((len(keys), len(MODALITIES)))
        y = np.zeros(len(keys))
        for i, key in enumerate(keys):
            for e in sessions[key]:
                values = self.values(e)
                if x is None:
                    n_mels = values.shape[1]
                    x = np.zeros((len(keys), len(MODALITIES), t_frames, n_mels), dtype=np.float32)
                k = MODALITIES.index(e.record.modality)
                x[i, k] = windows(values, t_frames, WindowPolicy.center_crop_or_pad)[0].values
                presence[i, k] = 1.0
                y[i] = max(y[i], e.record.y)
        if x is None:
            x = np.zeros((0, len(MODALITIES), t_frames, 1), dtype=np.float32)
        return net.Dataset(x, presence, y)

    def session_windows(self, sessions, t_frames: int) -> list[dict[str, list[np.ndarray]]]:
        out = []
        for entries in sessions.values():
            per = defaultdict(list)
            for e in entries:
                per[e.record.modality] += [w.values for w in windows(self.values(e), t_frames, WindowPolicy.tiled_50pct_overlap)]
            out.append(dict(per))
        return out

    def score(self, sessions, params, t_frames: int, split: SplitAssignment | None = None) -> list[ScoredSession]:
        probs = net.predict_sessions(self.session_windows(sessions, t_frames), params)
        trained = split.training_participants() if split is not None else set()
        out = []
        for (pid, sid), p in zip(sessions, probs):
            r = sessions[(pid, sid)][0].record
            out.append(ScoredSession(
                participant_id=pid, session_id=sid, probability=float(p),
                label=max(e.record.y for e in sessions[(pid, sid)]),
                gender=r.gender, age_bin=r.age_bin, language=r.language, symptomatic=r.symptomatic,
                seen_in_training=pid in trained, timestamp=r.timestamp,
            ))
        return out
