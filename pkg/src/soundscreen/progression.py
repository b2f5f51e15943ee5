"""Per-participant probability trajectories and trend calls.

The decision rule is a plain least-squares trend on median-smoothed
probabilities; it is a baseline, kept behind :func:`classify_progression` so
it can be swapped out.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DuplicateTimestamp

SECONDS_PER_DAY = 86400.0
DEFAULT_K_MIN = 3
DEFAULT_SLOPE_EPS = 0.02


class State(str, Enum):
    recovering = "recovering"
    deteriorating = "deteriorating"
    stable = "stable"
    insufficient_data = "insufficient_data"


@dataclass(frozen=True)
class Trajectory:
    participant_id: str
    timestamps: tuple[float, ...]
    probabilities: tuple[float, ...]
    smoothed: tuple[float, ...]

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.timestamps, self.probabilities))

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class ProgressionCall:
    state: State
    slope: float  # probability per day
    window: tuple[float, float]


def median3(values: Sequence[float]) -> list[float]:
    """Three-point running median; the two endpoints pass through unchanged."""
    v = list(values)
    if len(v) < 3:
        return v
    return [v[0]] + [float(np.median(v[i - 1 : i + 2])) for i in range(1, len(v) - 1)] + [v[-1]]


def build_trajectory(sessions) -> Trajectory:
    """Trajectory from one participant's scored sessions (anything with
    ``participant_id``, ``timestamp`` and ``probability``)."""
    sessions = list(sessions)
    if not sessions:
        raise ValueError("trajectory needs at least one session")
    pids = {s.participant_id for s in sessions}
    if len(pids) != 1:
        raise ValueError(f"sessions span {len(pids)} participants")
    return trajectory_from_points(pids.pop(), [(s.timestamp, s.probability) for s in sessions])


def trajectory_from_points(participant_id: str, points: Sequence[tuple[float, float]]) -> Trajectory:
    """Sort ``(timestamp, probability)`` points by time and smooth them."""
    if not points:
        raise ValueError("trajectory needs at least one session")
    pts = sorted((float(t), float(p)) for t, p in points)
    ts = [t for t, _ in pts]
    if len(set(ts)) != len(ts):
        raise DuplicateTimestamp(f"participant {participant_id} has two sessions at the same timestamp")
    probs = [p for _, p in pts]
    return Trajectory(participant_id, tuple(ts), tuple(probs), tuple(median3(probs)))


def trend_slope(timestamps: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of values against time, per day."""
    t = (np.asarray(timestamps, dtype=np.float64) - timestamps[0]) / SECONDS_PER_DAY
    v = np.asarray(values, dtype=np.float64)
    tc = t - t.mean()
    denom = float(np.sum(tc * tc))
    if denom == 0.0:
        return 0.0
    return float(np.sum(tc * (v - v.mean())) / denom)


def classify_progression(traj: Trajectory, k_min: int = DEFAULT_K_MIN, slope_eps: float = DEFAULT_SLOPE_EPS) -> ProgressionCall:
    window = (traj.timestamps[0], traj.timestamps[-1])
    if len(traj) < k_min:
        return ProgressionCall(State.insufficient_data, 0.0, window)
    slope = trend_slope(traj.timestamps, traj.smoothed)
    if slope < -slope_eps:
        state = State.recovering
    elif slope > slope_eps:
        state = State.deteriorating
    else:
        state = State.stable
    return ProgressionCall(state, slope, window)


def iso8601(ts: float) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def trajectories_csv(items: Sequence[tuple[Trajectory, ProgressionCall]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["participant_id", "timestamp_iso8601", "probability", "smoothed", "state"])
    for traj, call in items:
        for t, p, s in zip(traj.timestamps, traj.probabilities, traj.smoothed):
            w.writerow([traj.participant_id, iso8601(t), f"{p:.6f}", f"{s:.6f}", call.state.value])
    return buf.getvalue()


def progression_csv(items: Sequence[tuple[Trajectory, ProgressionCall]]) -> str:
    """One row per participant."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["participant_id", "n_points", "first_iso8601", "last_iso8601", "slope_per_day", "state"])
    for traj, call in items:
        w.writerow([traj.participant_id, len(traj), iso8601(call.window[0]), iso8601(call.window[1]),
                    f"{call.slope:.6f}", call.state.value])
    return buf.getvalue()
