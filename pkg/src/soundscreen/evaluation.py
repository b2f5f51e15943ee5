"""Discrimination metrics with participant-level bootstrap confidence intervals."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import OneClassOnly, TooDegenerate

DEFAULT_THRESHOLD = 0.5
SWEEP_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ScoredSession:
    participant_id: str
    session_id: str
    probability: float
    label: int
    gender: str = "unknown"
    age_bin: str = "unknown"
    language: str = "unknown"
    symptomatic: bool = False
    seen_in_training: bool = False
    timestamp: float = 0.0

    def key(self, axis: str) -> str:
        if axis == "overlap":
            return "seen" if self.seen_in_training else "unseen"
        if axis == "symptomatic":
            return "symptomatic" if self.symptomatic else "asymptomatic"
        return str(getattr(self, axis))


def _arrays(scored: Sequence[ScoredSession]):
    scores = np.array([s.probability for s in scored], dtype=np.float64)
    labels = np.array([s.label for s in scored], dtype=np.int64)
    return scores, labels


def _require_both(labels: np.ndarray):
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0 or n_pos == len(labels):
        raise OneClassOnly("need at least one positive and one negative")


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via rank sums."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scored: Sequence[ScoredSession]) -> float:
    return auc_score(*_arrays(scored))


def sens_spec_score(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both(labels)
    flagged = scores >= threshold
    pos = labels == 1
    sens = float(np.sum(flagged & pos) / np.sum(pos))
    spec = float(np.sum(~flagged & ~pos) / np.sum(~pos))
    return sens, spec


def sens_spec(scored: Sequence[ScoredSession], threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    return sens_spec_score(*_arrays(scored), threshold)


def roc_points(scores, labels):
    """Thresholds (descending, starting at +inf) with the matching FPR and TPR."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both(labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order] == 1
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    thresholds = np.r_[np.inf, s[last_of_run]]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    return thresholds, fpr, tpr


def roc_curve(scored: Sequence[ScoredSession]) -> list[tuple[float, float]]:
    _, fpr, tpr = roc_points(*_arrays(scored))
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(fpr, tpr) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


# --------------------------------------------------------------------------
# bootstrap


def _metric_auc(scores, labels):
    if labels.min() == labels.max():
        return math.nan
    return auc_score(scores, labels)


def _metric_sensitivity(scores, labels, threshold=DEFAULT_THRESHOLD):
    pos = labels == 1
    if not pos.any():
        return math.nan
    return float(np.mean(scores[pos] >= threshold))


def _metric_specificity(scores, labels, threshold=DEFAULT_THRESHOLD):
    neg = labels == 0
    if not neg.any():
        return math.nan
    return float(np.mean(scores[neg] < threshold))


METRICS: dict[str, Callable] = {
    "auc": _metric_auc,
    "sensitivity": _metric_sensitivity,
    "specificity": _metric_specificity,
}


@dataclass(frozen=True)
class CI:
    lo: float
    point: float
    hi: float
    n_valid: int = 0
    warning: str | None = None

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lo, self.point, self.hi)

    def fmt(self) -> str:
        return f"{self.point:.2f}({self.lo:.2f}-{self.hi:.2f})"


class _Resampler:
    """Draws bootstrap index sets, either per session or per participant."""

    def __init__(self, groups: Sequence[str] | None, n: int):
        if groups is None:
            self.order = None
            self.n_units = n
            return
        codes, inverse = np.unique(np.asarray(groups), return_inverse=True)
        self.order = np.argsort(inverse, kind="mergesort")
        self.counts = np.bincount(inverse, minlength=len(codes))
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
        self.n_units = len(codes)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        chosen = rng.integers(0, self.n_units, size=self.n_units)
        if self.order is None:
            return chosen
        counts = self.counts[chosen]
        offsets = np.repeat(self.starts[chosen] - np.cumsum(counts) + counts, counts)
        return self.order[offsets + np.arange(counts.sum())]


def resample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream per resample so results do not depend on evaluation order."""
    return np.random.default_rng([seed, index])


def bootstrap_ci(
    scored: Sequence[ScoredSession],
    metric: str | Callable = "auc",
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    cluster: bool = True,
) -> CI:
    """Percentile bootstrap interval around the full-sample metric.

    With ``cluster=True`` whole participants are resampled and carry all of
    their sessions along. Resamples where the metric is undefined (e.g. one
    class only for AUC) are skipped.
    """
    scores, labels = _arrays(scored)
    groups = [s.participant_id for s in scored] if cluster else None
    return bootstrap_arrays(scores, labels, metric, groups, n_resamples, seed, level)


def bootstrap_arrays(scores, labels, metric="auc", groups=None, n_resamples=1000, seed=0, level=0.95) -> CI:
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    fn = METRICS[metric] if isinstance(metric, str) else metric
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    point = fn(scores, labels)
    if point is None or math.isnan(point):
        raise OneClassOnly("metric undefined on the full sample")
    sampler = _Resampler(groups, len(scores))
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        idx = sampler.draw(resample_rng(seed, i))
        values[i] = fn(scores[idx], labels[idx])
    valid = values[~np.isnan(values)]
    if len(valid) < n_resamples / 2:
        raise TooDegenerate(f"{n_resamples - len(valid)} of {n_resamples} resamples were degenerate")
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(valid, [tail, 100.0 - tail])
    warning = None
    if not lo <= point <= hi:
        warning = f"point estimate {point:.4f} outside bootstrap interval [{lo:.4f}, {hi:.4f}]"
    return CI(float(lo), float(point), float(hi), len(valid), warning)


# --------------------------------------------------------------------------
# threshold sweep


def threshold_sweep(
    scored: Sequence[ScoredSession],
    thresholds: Iterable[float] = SWEEP_THRESHOLDS,
    n_resamples: int = 1000,
    seed: int = 0,
    level: float = 0.95,
    cluster: bool = True,
) -> list[dict]:
    """Sensitivity and specificity with percentile CIs at each threshold."""
    scores, labels = _arrays(scored)
    _require_both(labels)
    thr = np.asarray(list(thresholds), dtype=np.float64)

    def rates(s, y):
        pos = np.sort(s[y == 1])
        neg = np.sort(s[y == 0])
        sens = (len(pos) - np.searchsorted(pos, thr, side="left")) / len(pos) if len(pos) else np.full(len(thr), np.nan)
        spec = np.searchsorted(neg, thr, side="left") / len(neg) if len(neg) else np.full(len(thr), np.nan)
        return sens, spec

    sens0, spec0 = rates(scores, labels)
    sampler = _Resampler([s.participant_id for s in scored] if cluster else None, len(scores))
    boot_sens = np.empty((n_resamples, len(thr)))
    boot_spec = np.empty((n_resamples, len(thr)))
    for i in range(n_resamples):
        idx = sampler.draw(resample_rng(seed, i))
        boot_sens[i], boot_spec[i] = rates(scores[idx], labels[idx])
    tail = (1.0 - level) / 2.0 * 100.0
    s_lo, s_hi = np.nanpercentile(boot_sens, [tail, 100.0 - tail], axis=0)
    p_lo, p_hi = np.nanpercentile(boot_spec, [tail, 100.0 - tail], axis=0)
    return [
        dict(threshold=float(t), sensitivity=float(a), sensitivity_lo=float(b), sensitivity_hi=float(c),
             specificity=float(d), specificity_lo=float(e), specificity_hi=float(f))
        for t, a, b, c, d, e, f in zip(thr, sens0, s_lo, s_hi, spec0, p_lo, p_hi)
    ]


# --------------------------------------------------------------------------
# subgroup reports


@dataclass
class EvalReport:
    n_users_pos: int
    n_samples_pos: int
    n_users_neg: int
    n_samples_neg: int
    threshold: float
    auc: CI | None = None
    sensitivity: CI | None = None
    specificity: CI | None = None
    subgroups: dict[str, dict[str, "EvalReport"]] = field(default_factory=dict)

    @property
    def counts(self) -> str:
        return f"{self.n_users_pos}({self.n_samples_pos})/{self.n_users_neg}({self.n_samples_neg})"

    def to_dict(self) -> dict:
        def ci(c):
            return None if c is None else asdict(c)

        return {
            "n_users_pos": self.n_users_pos,
            "n_samples_pos": self.n_samples_pos,
            "n_users_neg": self.n_users_neg,
            "n_samples_neg": self.n_samples_neg,
            "counts": self.counts,
            "threshold": self.threshold,
            "auc": ci(self.auc),
            "sensitivity": ci(self.sensitivity),
            "specificity": ci(self.specificity),
            "subgroups": {
                axis: {cat: rep.to_dict() for cat, rep in cats.items()} for axis, cats in self.subgroups.items()
            },
        }

    def to_text(self, title: str = "Total") -> str:
        header = f"{'Subgroup':<18}{'#Users(#Samples)':<22}{'AUC(95% CI)':<18}{'Sensitivity(95% CI)':<22}{'Specificity(95% CI)':<20}"
        lines = [header, "-" * len(header), self._row(title)]
        for axis, cats in self.subgroups.items():
            lines.append(axis.replace("_", " ").title())
            for cat, rep in cats.items():
                lines.append(rep._row("  " + cat))
        return "\n".join(lines) + "\n"

    def _row(self, name: str) -> str:
        def f(c):
            return "-" if c is None else c.fmt()

        return f"{name:<18}{self.counts:<22}{f(self.auc):<18}{f(self.sensitivity):<22}{f(self.specificity):<20}"


def mark_seen(scored: Sequence[ScoredSession], split) -> list[ScoredSession]:
    """Recompute ``seen_in_training`` from the split, ignoring any incoming value."""
    trained = split.training_participants()
    return [replace(s, seen_in_training=s.participant_id in trained) for s in scored]


def _report(scored, threshold, n_resamples, seed, cluster) -> EvalReport:
    pos = [s for s in scored if s.label == 1]
    neg = [s for s in scored if s.label == 0]
    rep = EvalReport(
        n_users_pos=len({s.participant_id for s in pos}),
        n_samples_pos=len(pos),
        n_users_neg=len({s.participant_id for s in neg}),
        n_samples_neg=len(neg),
        threshold=threshold,
    )

    def ci(metric):
        try:
            return bootstrap_ci(scored, metric, n_resamples, seed, cluster=cluster)
        except (OneClassOnly, TooDegenerate):
            return None

    if pos and neg:
        rep.auc = ci("auc")
    if pos:
        rep.sensitivity = ci(lambda s, y: _metric_sensitivity(s, y, threshold))
    if neg:
        rep.specificity = ci(lambda s, y: _metric_specificity(s, y, threshold))
    return rep


def subgroup_report(
    scored: Sequence[ScoredSession],
    split=None,
    axes: Sequence[str] = ("gender", "age_bin"),
    threshold: float = DEFAULT_THRESHOLD,
    n_resamples: int = 1000,
    seed: int = 0,
    cluster: bool = True,
) -> EvalReport:
    """Overall report plus one sub-report per category of every axis.

    When a split is given, sessions are re-marked as seen/unseen and the
    ``overlap`` axis is added. Cells lacking a class keep their counts and
    drop the metrics that class is needed for.
    """
    scored = list(scored)
    _require_both(np.array([s.label for s in scored]))
    axes = list(axes)
    if split is not None:
        scored = mark_seen(scored, split)
        if "overlap" not in axes:
            axes.append("overlap")
    rep = _report(scored, threshold, n_resamples, seed, cluster)
    for axis in axes:
        cats: dict[str, EvalReport] = {}
        for cat in sorted({s.key(axis) for s in scored}):
            members = [s for s in scored if s.key(axis) == cat]
            cats[cat] = _report(members, threshold, n_resamples, seed, cluster)
        rep.subgroups[axis] = cats
    return rep
