"""Manifests, participant-level splits, demographic matching and bias injection."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConsistencyError, DuplicateKey, InsufficientCohort, SchemaError, Unmatchable

MODALITIES = ("breathing", "cough", "voice")
LABELS = ("positive", "negative")
AGE_BINS = ("16-29", "30-39", "40-49", "50-59", "60-69", "70+", "unknown")
GENDERS = ("male", "female", "unknown")
SETS = ("train", "validation", "test")
AXES = ("gender", "age_bin", "language")
UNKNOWN = "unknown"

CONFOUNDER_V = 0.2
DEFAULT_TOLERANCE_PP = 5.0
DEFAULT_MIN_TEST_SIZE = 5


@dataclass(frozen=True)
class SampleRecord:
    participant_id: str
    session_id: str
    modality: str
    label: str
    age_bin: str
    gender: str
    language: str
    symptomatic: bool
    timestamp: float
    audio_path: str

    @property
    def y(self) -> int:
        return int(self.label == "positive")

    def demographics(self) -> tuple[str, str, str]:
        return (self.gender, self.age_bin, self.language)


_ENUMS = {"modality": MODALITIES, "label": LABELS, "age_bin": AGE_BINS, "gender": GENDERS}
_STRINGS = ("participant_id", "session_id", "language", "audio_path")


def _parse_record(obj, line_no: int) -> SampleRecord:
    if not isinstance(obj, dict):
        raise SchemaError(line_no, "<line>", "expected a JSON object")
    values = {}
    for name in _STRINGS:
        v = obj.get(name)
        if not isinstance(v, str) or (name != "language" and not v):
            raise SchemaError(line_no, name, "expected a non-empty string")
        values[name] = v
    for name, allowed in _ENUMS.items():
        v = obj.get(name)
        if v not in allowed:
            raise SchemaError(line_no, name, f"expected one of {', '.join(allowed)}")
        values[name] = v
    if not isinstance(obj.get("symptomatic"), bool):
        raise SchemaError(line_no, "symptomatic", "expected a boolean")
    ts = obj.get("timestamp")
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise SchemaError(line_no, "timestamp", "expected UTC seconds")
    return SampleRecord(symptomatic=obj["symptomatic"], timestamp=float(ts), **values)


def parse_manifest(text: str) -> list[SampleRecord]:
    """Parse and validate a JSONL manifest (blank lines are ignored)."""
    records: list[SampleRecord] = []
    seen: set[tuple[str, str, str]] = set()
    demo: dict[str, tuple[str, str, str]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(line_no, "<line>", f"invalid JSON ({exc.msg})") from None
        rec = _parse_record(obj, line_no)
        key = (rec.participant_id, rec.session_id, rec.modality)
        if key in seen:
            raise DuplicateKey(f"line {line_no}: duplicate {key}")
        seen.add(key)
        prev = demo.setdefault(rec.participant_id, rec.demographics())
        if prev != rec.demographics():
            raise ConsistencyError(
                f"line {line_no}: participant {rec.participant_id} has demographics {rec.demographics()} but earlier {prev}"
            )
        records.append(rec)
    return records


def dump_manifest(records: Iterable[SampleRecord]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in records)


@dataclass(frozen=True)
class ParticipantProfile:
    participant_id: str
    label: str  # positive if any session is positive
    gender: str
    age_bin: str
    language: str
    sessions: tuple[str, ...]

    def category(self, axis: str) -> str:
        return getattr(self, axis)


def participant_profiles(records: Sequence[SampleRecord]) -> dict[str, ParticipantProfile]:
    by_pid: dict[str, list[SampleRecord]] = defaultdict(list)
    for r in records:
        by_pid[r.participant_id].append(r)
    out = {}
    for pid in sorted(by_pid):
        rs = by_pid[pid]
        label = "positive" if any(r.label == "positive" for r in rs) else "negative"
        out[pid] = ParticipantProfile(pid, label, rs[0].gender, rs[0].age_bin, rs[0].language,
                                      tuple(sorted({r.session_id for r in rs})))
    return out


# --------------------------------------------------------------------------
# split assignment


class SplitMode(str, Enum):
    participant_random = "participant_random"
    participant_matched = "participant_matched"
    sample_random = "sample_random"
    gender_biased = "gender_biased"
    age_biased = "age_biased"
    language_biased = "language_biased"


@dataclass
class SplitAssignment:
    mode: SplitMode
    seed: int
    participants: dict[str, str] = field(default_factory=dict)
    sessions: dict[tuple[str, str], str] = field(default_factory=dict)
    dropped: list[str] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    @property
    def session_level(self) -> bool:
        return self.mode is SplitMode.sample_random

    @property
    def leakage_possible(self) -> bool:
        return self.session_level

    def set_of(self, participant_id: str, session_id: str) -> str | None:
        if self.session_level:
            return self.sessions.get((participant_id, session_id))
        return self.participants.get(participant_id)

    def participants_in(self, which: str) -> set[str]:
        if self.session_level:
            return {pid for (pid, _), s in self.sessions.items() if s == which}
        return {pid for pid, s in self.participants.items() if s == which}

    def training_participants(self) -> set[str]:
        return self.participants_in("train")

    def to_json(self) -> dict:
        if self.session_level:
            assignments = [
                {"participant_id": pid, "session_id": sid, "set": s} for (pid, sid), s in sorted(self.sessions.items())
            ]
        else:
            assignments = [{"participant_id": pid, "set": s} for pid, s in sorted(self.participants.items())]
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "leakage_possible": self.leakage_possible,
            "assignments": assignments,
            "dropped": sorted(self.dropped),
            "report": self.report,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SplitAssignment":
        split = cls(SplitMode(obj["mode"]), int(obj["seed"]), dropped=list(obj.get("dropped", [])),
                    report=dict(obj.get("report", {})))
        for a in obj["assignments"]:
            if split.session_level:
                split.sessions[(a["participant_id"], a["session_id"])] = a["set"]
            else:
                split.participants[a["participant_id"]] = a["set"]
        return split


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``n`` that track ``n * fractions`` within one unit."""
    raw = [n * f for f in fractions]
    counts = [math.floor(x + 1e-9) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _interleave(n: int, counts: Sequence[int]) -> list[int]:
    """Set index per position such that every prefix is split close to proportionally."""
    assigned = [0] * len(counts)
    out = []
    for i in range(n):
        best = max(
            (k for k in range(len(counts)) if assigned[k] < counts[k]),
            key=lambda k: ((i + 1) * counts[k] / n - assigned[k], -k),
        )
        assigned[best] += 1
        out.append(best)
    return out


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive numbers summing to 1")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _ensure_straddler(split: SplitAssignment, labels: Mapping[tuple[str, str], int]) -> None:
    """Make sure a session-level split exposes identity leakage when it can.

    If no participant spans two sets although some has several sessions, the
    first such participant's last session swaps sets with the first
    same-label session of another set. Set sizes per label are unchanged.
    """
    per: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for key in sorted(split.sessions):
        per[key[0]].append(key)
    if any(len({split.sessions[k] for k in keys}) > 1 for keys in per.values()):
        return
    multi = [keys for _, keys in sorted(per.items()) if len(keys) > 1]
    if not multi:
        return
    mine = multi[0][-1]
    home = split.sessions[mine]
    for other in sorted(split.sessions):
        if split.sessions[other] != home and labels[other] == labels[mine]:
            split.sessions[mine], split.sessions[other] = split.sessions[other], home
            split.report["forced_straddler"] = mine[0]
            return


def split_participants(
    records: Sequence[SampleRecord],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    mode: SplitMode | str = SplitMode.participant_random,
    seed: int = 0,
    match_axes: Sequence[str] = ("gender", "age_bin"),
    tolerance_pp: float = DEFAULT_TOLERANCE_PP,
    min_test_size: int = DEFAULT_MIN_TEST_SIZE,
) -> SplitAssignment:
    """Label-stratified train/validation/test split.

    ``participant_random`` and ``participant_matched`` assign whole
    participants; the matched mode also stratifies on ``match_axes`` and then
    balances the test set with :func:`match_demographics`.
    ``sample_random`` assigns each session on its own, so a participant can
    land in several sets.
    """
    mode = SplitMode(mode)
    _check_ratios(ratios)
    profiles = participant_profiles(records)
    split = SplitAssignment(mode, seed)

    if mode is SplitMode.sample_random:
        labels = {}
        for r in records:
            labels[(r.participant_id, r.session_id)] = max(labels.get((r.participant_id, r.session_id), 0), r.y)
        for k, lab in enumerate((1, 0)):
            keys = sorted(key for key, y in labels.items() if y == lab)
            keys = [keys[i] for i in _rng(seed, k).permutation(len(keys))]
            counts = largest_remainder(len(keys), ratios)
            if min(counts) < 1:
                raise InsufficientCohort(f"not enough {LABELS[k]} sessions to populate every set")
            start = 0
            for s, c in zip(SETS, counts):
                for key in keys[start : start + c]:
                    split.sessions[key] = s
                start += c
        _ensure_straddler(split, labels)
        return split

    if mode not in (SplitMode.participant_random, SplitMode.participant_matched):
        raise ValueError(f"{mode.value} splits are built with inject_bias")
    for k, label in enumerate(LABELS):
        pids = sorted(p for p, prof in profiles.items() if prof.label == label)
        counts = largest_remainder(len(pids), ratios)
        if min(counts) < 1:
            raise InsufficientCohort(f"not enough {label} participants to populate every set")
        perm = _rng(seed, k).permutation(len(pids))
        pids = [pids[i] for i in perm]
        if mode is SplitMode.participant_matched:
            strata = defaultdict(list)
            for p in pids:
                strata[tuple(profiles[p].category(a) for a in match_axes)].append(p)
            keys = sorted(strata)
            keys = [keys[i] for i in _rng(seed, k, 1).permutation(len(keys))]
            pids = [p for key in keys for p in strata[key]]
            slots = _interleave(len(pids), counts)
        else:
            slots = [s for s, c in enumerate(counts) for _ in range(c)]
        for p, s in zip(pids, slots):
            split.participants[p] = SETS[s]
    if mode is SplitMode.participant_matched:
        return match_demographics(records, split, match_axes, tolerance_pp, min_test_size)
    return split


# --------------------------------------------------------------------------
# demographic matching


def _gap_score(counts: Mapping[str, Counter], axes: Sequence[str], tolerance_pp: float) -> tuple[float, float]:
    """(summed excess over tolerance, summed absolute gap), both in percentage points."""
    excess = 0.0
    gap = 0.0
    for axis in axes:
        pos, neg = counts[("positive", axis)], counts[("negative", axis)]
        n_pos = sum(v for c, v in pos.items() if c != UNKNOWN)
        n_neg = sum(v for c, v in neg.items() if c != UNKNOWN)
        if n_pos == 0 or n_neg == 0:
            continue
        for cat in set(pos) | set(neg):
            if cat == UNKNOWN:
                continue
            d = abs(pos[cat] / n_pos - neg[cat] / n_neg) * 100.0
            gap += d
            excess += max(0.0, d - tolerance_pp - 1e-9)
    return round(excess, 9), round(gap, 9)


def match_demographics(
    records: Sequence[SampleRecord],
    split: SplitAssignment,
    axes: Sequence[str] = ("gender", "age_bin"),
    tolerance_pp: float = DEFAULT_TOLERANCE_PP,
    min_test_size: int = DEFAULT_MIN_TEST_SIZE,
) -> SplitAssignment:
    """Greedily swap test participants with validation ones, or drop them, until
    positives and negatives in the test set agree on every category share of every
    axis within ``tolerance_pp`` percentage points. Unknown categories are ignored.
    Training membership is never touched.
    """
    if split.session_level:
        raise ValueError("matching needs a participant-level split")
    profiles = participant_profiles(records)
    assign = dict(split.participants)
    dropped = list(split.dropped)

    def test_counts():
        counts = defaultdict(Counter)
        for p, s in assign.items():
            if s == "test":
                prof = profiles[p]
                for axis in axes:
                    counts[(prof.label, axis)][prof.category(axis)] += 1
        return counts

    def apply(counts, p, sign):
        prof = profiles[p]
        for axis in axes:
            counts[(prof.label, axis)][prof.category(axis)] += sign

    counts = test_counts()
    score = _gap_score(counts, axes, tolerance_pp)
    moves = 0
    while score[0] > 0:
        test = sorted(p for p, s in assign.items() if s == "test")
        val = sorted(p for p, s in assign.items() if s == "validation")
        size = Counter(profiles[p].label for p in test)
        best = None
        for p in test:
            label = profiles[p].label
            for q in (q for q in val if profiles[q].label == label):
                apply(counts, p, -1)
                apply(counts, q, +1)
                cand = (_gap_score(counts, axes, tolerance_pp), 0, p, q)
                apply(counts, q, -1)
                apply(counts, p, +1)
                if best is None or cand < best:
                    best = cand
            if size[label] > min_test_size:
                apply(counts, p, -1)
                cand = (_gap_score(counts, axes, tolerance_pp), 1, p, None)
                apply(counts, p, +1)
                if best is None or cand < best:
                    best = cand
        if best is None or best[0] >= score:
            raise Unmatchable(
                f"test set cannot reach {tolerance_pp} pp balance on {', '.join(axes)} "
                f"with at least {min_test_size} participants per class"
            )
        new_score, _, p, q = best
        apply(counts, p, -1)
        if q is None:
            del assign[p]
            dropped.append(p)
        else:
            apply(counts, q, +1)
            assign[p], assign[q] = "validation", "test"
        score = new_score
        moves += 1
    out = SplitAssignment(split.mode, split.seed, assign, dict(split.sessions), dropped, dict(split.report))
    out.report["matching"] = {"axes": list(axes), "tolerance_pp": tolerance_pp, "moves": moves,
                              "dropped": len(dropped) - len(split.dropped)}
    return out


# --------------------------------------------------------------------------
# bias injection


@dataclass(frozen=True)
class BiasSpec:
    """Target category mix per label arm for the training (and validation) sets.

    ``test_policy`` ``balanced`` gives both arms the same uniform mix over the
    listed categories; ``natural`` reuses the skewed training mix, so the test
    set carries the same confound as training.
    """

    axis: str
    train_skew: Mapping[str, Mapping[str, float]]
    test_policy: str = "balanced"
    n_train_per_class: int | None = None
    n_val_per_class: int | None = None
    n_test_per_class: int | None = None

    def __post_init__(self):
        if self.axis not in ("gender", "age_bin", "language"):
            raise ValueError(f"unknown bias axis {self.axis!r}")
        if self.test_policy not in ("balanced", "natural"):
            raise ValueError("test_policy must be 'balanced' or 'natural'")
        for arm in LABELS:
            props = self.train_skew.get(arm)
            if not props or abs(sum(props.values()) - 1.0) > 1e-6 or min(props.values()) < 0:
                raise ValueError(f"train_skew[{arm!r}] must be proportions summing to 1")

    @classmethod
    def from_json(cls, obj: Mapping) -> "BiasSpec":
        return cls(**obj)

    def categories(self) -> list[str]:
        return sorted(set(self.train_skew["positive"]) | set(self.train_skew["negative"]))


_BIAS_MODE = {"gender": SplitMode.gender_biased, "age_bin": SplitMode.age_biased, "language": SplitMode.language_biased}


def inject_bias(records: Sequence[SampleRecord], spec: BiasSpec, seed: int = 0) -> SplitAssignment:
    """Participant-disjoint split whose training arms follow ``spec.train_skew``.

    Training is drawn first, then validation with the same mix, then the test
    set per ``spec.test_policy``; so for a fixed seed the training set does not
    depend on the test policy.
    """
    profiles = participant_profiles(records)
    smallest = min(sum(1 for p in profiles.values() if p.label == lab) for lab in LABELS)
    n_train = spec.n_train_per_class if spec.n_train_per_class is not None else int(0.6 * smallest)
    n_val = spec.n_val_per_class if spec.n_val_per_class is not None else max(1, int(0.1 * smallest))
    n_test = spec.n_test_per_class if spec.n_test_per_class is not None else max(1, int(0.2 * smallest))

    pools: dict[tuple[str, str], list[str]] = {}
    for k, label in enumerate(LABELS):
        for j, cat in enumerate(sorted({p.category(spec.axis) for p in profiles.values()})):
            pids = sorted(p for p, prof in profiles.items() if prof.label == label and prof.category(spec.axis) == cat)
            pools[(label, cat)] = [pids[i] for i in _rng(seed, k, j).permutation(len(pids))]

    cats_all = spec.categories()
    uniform = {c: 1.0 / len(cats_all) for c in cats_all}
    split = SplitAssignment(_BIAS_MODE[spec.axis], seed)
    plan = [("train", n_train, None), ("validation", n_val, None), ("test", n_test, spec.test_policy)]
    for set_name, n, policy in plan:
        for label in LABELS:
            mix = uniform if policy == "balanced" else spec.train_skew[label]
            cats = sorted(mix)
            for cat, c in zip(cats, largest_remainder(n, [mix[c] for c in cats])):
                pool = pools.get((label, cat), [])
                if len(pool) < c:
                    raise InsufficientCohort(
                        f"cell ({label}, {spec.axis}={cat}) needs {c} more participants for {set_name}, has {len(pool)}"
                    )
                for p in pool[:c]:
                    split.participants[p] = set_name
                del pool[:c]
    split.report["bias_spec"] = {"axis": spec.axis, "train_skew": {k: dict(v) for k, v in spec.train_skew.items()},
                                 "test_policy": spec.test_policy}
    return split


# --------------------------------------------------------------------------
# confounder audit


def cramers_v(table) -> float:
    """Cramér's V of a contingency table (no continuity correction).

    Empty rows and columns are dropped first; fewer than two of either gives 0.
    """
    t = np.asarray(table, dtype=np.float64)
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.ndim != 2 or min(t.shape) < 2:
        return 0.0
    n = t.sum()
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / n
    chi2 = float(np.sum((t - expected) ** 2 / expected))
    return math.sqrt(chi2 / (n * (min(t.shape) - 1)))


def confounder_report(records: Sequence[SampleRecord], split: SplitAssignment, axes: Sequence[str] = AXES) -> dict:
    """Per set and axis: participant contingency table (label x category) and Cramér's V."""
    profiles = participant_profiles(records)
    report: dict = {}
    for set_name in SETS:
        members = sorted(split.participants_in(set_name))
        per_axis = {}
        for axis in axes:
            cats = sorted({profiles[p].category(axis) for p in members} - {UNKNOWN})
            table = {label: [0] * len(cats) for label in LABELS}
            for p in members:
                cat = profiles[p].category(axis)
                if cat != UNKNOWN:
                    table[profiles[p].label][cats.index(cat)] += 1
            v = cramers_v([table[label] for label in LABELS]) if cats else 0.0
            per_axis[axis] = {"categories": cats, "table": table, "cramers_v": round(v, 12),
                              "confounded": v > CONFOUNDER_V}
        report[set_name] = per_axis
    return report


def confounded_axes(report: Mapping, set_name: str = "train") -> list[str]:
    return [axis for axis, entry in report.get(set_name, {}).items() if entry["confounded"]]
