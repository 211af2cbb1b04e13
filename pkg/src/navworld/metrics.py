"""Navigation metrics: success rate, SPL, SoftSPL and normalised DTW.

Inputs are in centimetres. nDTW converts to metres before aligning, since
its normalisation constant is dimensionful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_DELTA_CM = 100.0
DEFAULT_ETA = 5.0


@dataclass
class TrajectoryRecord:
    poses: list[tuple[float, float]]
    executed_length: float
    final_d: float
    reference: list[tuple[float, float]]
    L_star: float
    d0: float
    delta: float = DEFAULT_DELTA_CM
    episode_id: str = ""

    def __post_init__(self):
        if not self.poses:
            raise ValueError("trajectory must have at least one pose")
        if self.executed_length < 0:
            raise ValueError("executed length must be >= 0")

    @classmethod
    def from_positions(cls, poses: Sequence[tuple[float, float]], final_d: float,
                       reference: Sequence[tuple[float, float]], L_star: float, d0: float,
                       delta: float = DEFAULT_DELTA_CM, episode_id: str = "") -> "TrajectoryRecord":
        p = np.asarray(poses, dtype=float).reshape(-1, 2)
        length = float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0
        return cls([tuple(map(float, q)) for q in poses], length, float(final_d),
                   [tuple(map(float, w)) for w in reference], float(L_star), float(d0), delta, episode_id)

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "poses": [list(p) for p in self.poses],
                "executed_length": self.executed_length, "final_d": self.final_d,
                "reference": [list(w) for w in self.reference], "L_star": self.L_star, "d0": self.d0,
                "delta": self.delta}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls([tuple(p) for p in d["poses"]], d["executed_length"], d["final_d"],
                   [tuple(w) for w in d["reference"]], d["L_star"], d["d0"], d.get("delta", DEFAULT_DELTA_CM),
                   d.get("episode_id", ""))


@dataclass
class MetricReport:
    SR: float
    SPL: float
    SoftSPL: float
    nDTW: float
    N: int
    per_episode: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, with_episodes: bool = False) -> dict:
        d = {"SR": self.SR, "SPL": self.SPL, "SoftSPL": self.SoftSPL, "nDTW": self.nDTW, "N": self.N}
        if with_episodes:
            d["per_episode"] = self.per_episode
        return d


def success(rec: TrajectoryRecord) -> int:
    return int(rec.final_d < rec.delta)


def spl(rec: TrajectoryRecord) -> float:
    if rec.L_star <= 0:
        raise ValueError("SPL undefined for L_star = 0")
    return success(rec) * rec.L_star / max(rec.executed_length, rec.L_star)


def softspl(rec: TrajectoryRecord) -> float:
    if rec.d0 <= 0:
        raise ValueError("SoftSPL undefined for d0 = 0")
    return max(0.0, 1.0 - rec.final_d / rec.d0) * rec.L_star / max(rec.executed_length, rec.L_star)


def dtw(p: Sequence, q: Sequence) -> float:
    """Dynamic-time-warping cost with Euclidean point cost and match/insert/delete moves."""
    a = np.asarray(p, dtype=float).reshape(len(p), -1)
    b = np.asarray(q, dtype=float).reshape(len(q), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs two nonempty paths")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    row = np.cumsum(cost[0])
    for i in range(1, len(a)):
        c = cost[i]
        diag = np.concatenate(([np.inf], row[:-1]))
        t = c + np.minimum(row, diag)  # best entry into (i, j) from row i-1
        s = np.cumsum(c)
        # allow horizontal runs within row i: D_j = min_k<=j (t_k + s_j - s_k)
        row = s + np.minimum.accumulate(t - s)
    return float(row[-1])


def ndtw(rec: TrajectoryRecord, eta: float = DEFAULT_ETA) -> float:
    if eta <= 0:
        raise ValueError("eta must be > 0")
    p = np.asarray(rec.poses, dtype=float) / 100.0
    q = np.asarray(rec.reference, dtype=float) / 100.0
    return math.exp(-dtw(p, q) / (eta * len(q)))


def episode_metrics(rec: TrajectoryRecord, eta: float = DEFAULT_ETA) -> dict:
    return {"episode_id": rec.episode_id, "success": success(rec), "SPL": spl(rec), "SoftSPL": softspl(rec),
            "nDTW": ndtw(rec, eta), "final_d": rec.final_d, "executed_length": rec.executed_length,
            "L_star": rec.L_star, "ref_waypoints": len(rec.reference)}


def aggregate(records: Iterable[TrajectoryRecord], eta: float = DEFAULT_ETA,
              delta: float | None = None) -> MetricReport:
    """Unweighted per-episode means. ``delta`` (cm) overrides each record's threshold when given."""
    rows = []
    for rec in records:
        if delta is not None:
            rec = TrajectoryRecord(rec.poses, rec.executed_length, rec.final_d, rec.reference, rec.L_star,
                                   rec.d0, delta, rec.episode_id)
        rows.append(episode_metrics(rec, eta))
    if not rows:
        raise ValueError("cannot aggregate an empty record set")
    n = len(rows)
    return MetricReport(sum(r["success"] for r in rows) / n, sum(r["SPL"] for r in rows) / n,
                        sum(r["SoftSPL"] for r in rows) / n, sum(r["nDTW"] for r in rows) / n, n, rows)
