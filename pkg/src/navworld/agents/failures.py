"""Failure-mode extraction over a finished rollout, using the five-category taxonomy."""

from __future__ import annotations

from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field

CATEGORIES = ("Directional", "Loop", "GoalProximity", "ObstacleAvoidance", "Timeout")


@dataclass(frozen=True)
class FailureConfig:
    loop_visits: int = 3
    loop_window: int = 10
    directional_bearing_deg: float = 15.0
    collision_repeats: int = 3
    success_distance_m: float = 1.0


@dataclass
class FailureMode:
    category: str
    evidence: tuple[int, ...]
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown failure category {self.category!r}")
        self.evidence = tuple(self.evidence)

    def to_dict(self) -> dict:
        return {"category": self.category, "evidence": list(self.evidence), "context": self.context}


def arrivals(actions, cells) -> list[tuple[int, tuple[int, int]]]:
    """(step, cell) for the start and for every MoveForward attempt; turning in place is not a visit."""
    out = [(0, tuple(cells[0]))]
    for i, a in enumerate(actions):
        if a == "MoveForward":
            out.append((i + 1, tuple(cells[i + 1])))
    return out


def loop_steps(actions, cells, visits: int = 3, window: int = 10) -> list[int]:
    """Steps at which some cell has collected ``visits`` arrivals inside the trailing ``window`` steps."""
    hits = []
    recent: deque = deque()
    for step, cell in arrivals(actions, cells):
        recent.append((step, cell))
        while recent[0][0] <= step - window:
            recent.popleft()
        if sum(1 for _, c in recent if c == cell) >= visits:
            hits.append(step)
    return hits


def _median_at(rollout, steps, key: str) -> float:
    feats = rollout.features
    vals = sorted(feats[min(s, len(feats) - 1)][key] for s in steps) if feats and steps else []
    return vals[len(vals) // 2] if vals else 0.0


def extract_failures(rollout, episode=None, config: FailureConfig = FailureConfig()) -> list[FailureMode]:
    """Failure modes of one rollout, in taxonomy order; a perfect trajectory yields []."""
    acts, feats = rollout.actions, rollout.features
    found: dict[str, list[int]] = defaultdict(list)
    extra: dict[str, dict] = defaultdict(dict)

    for i, a in enumerate(acts):
        f = feats[i]
        if a in ("TurnLeft", "TurnRight") and abs(f["bearing"]) <= config.directional_bearing_deg \
                and f["forward_free"]:
            found["Directional"].append(i)

    found["Loop"] = loop_steps(acts, rollout.cells, config.loop_visits, config.loop_window)

    dists = [f["distance_m"] for f in feats] + [rollout.record.final_d / 100.0]
    if rollout.stopped and dists[-1] >= config.success_distance_m:
        found["GoalProximity"].append(len(acts) - 1)
    elif not rollout.stopped and min(dists) < config.success_distance_m:
        found["GoalProximity"].append(min(range(len(dists)), key=dists.__getitem__))

    per_cell = Counter(tuple(c) for _, c in rollout.collisions)
    for cell, n in sorted(per_cell.items()):
        if n >= config.collision_repeats:
            found["ObstacleAvoidance"].extend(s for s, c in rollout.collisions if tuple(c) == cell)
            extra["ObstacleAvoidance"].setdefault("cells", []).append(list(cell))
    if rollout.truncated:
        # evidence: the final run of steps without a new best distance, i.e. where the agent got stuck
        best = min(range(len(feats)), key=lambda i: (feats[i]["distance_m"], i)) if feats else 0
        found["Timeout"].extend(range(best, len(acts)))

    out = []
    for cat in CATEGORIES:
        steps = sorted(set(found.get(cat, [])))
        if steps:
            ctx = {"clutter": _median_at(rollout, steps, "clutter"),
                   "distance": _median_at(rollout, steps, "distance_m"), **extra.get(cat, {})}
            out.append(FailureMode(cat, tuple(steps), ctx))
    return out
