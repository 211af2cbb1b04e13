"""Per-step decision features: observation scalars plus short-horizon history counters.

Rule conditions are evaluated against the flat dict produced here, so every
feature a rule may mention is listed in FEATURES.
"""

from __future__ import annotations

from collections import Counter, deque
from collections.abc import Mapping
from dataclasses import dataclass

from ..scene import normalize_angle

REVISIT_WINDOW = 10
COLLISION_WINDOW = 5
PROGRESS_WINDOW = 10
MAX_PROBE_TURNS = 12  # 12 x 15 deg = half a revolution; beyond that the other side is nearer
NO_HEADING = MAX_PROBE_TURNS + 1

FEATURES = ("bearing", "abs_bearing", "distance", "forward_free", "clutter", "steps", "revisits",
            "recent_collisions", "stalled", "progress", "open_left", "open_right", "explore_turns")


def open_turns(obs, direction: int, turn_deg: float = 15.0) -> int:
    """Number of turns in ``direction`` (-1 left, +1 right) until a forward move would succeed.

    0 means the current heading is already free; MAX_PROBE_TURNS + 1 means no
    free heading within half a revolution.
    """
    for k in range(MAX_PROBE_TURNS + 1):
        if obs.heading_free(direction * k * turn_deg):
            return k
    return NO_HEADING


def explore_turns(obs, visits: Mapping, turn_deg: float = 15.0) -> int:
    """Signed turns (negative left) toward the free heading whose landing cell was entered least often.

    Ties go to the heading closest to the goal bearing, then to the fewest
    turns, right before left. NO_HEADING when every heading is blocked.
    """
    half = round(180.0 / turn_deg)
    best = None
    for j in sorted(range(-half + 1, half + 1), key=lambda j: (abs(j), -j)):
        off = j * turn_deg
        if not obs.heading_free(off):
            continue
        key = (visits.get(obs.cell_ahead(off), 0), abs(normalize_angle(obs.bearing - off)))
        if best is None or key < best[0]:
            best = (key, j)
    return NO_HEADING if best is None else best[1]


class Features(Mapping):
    """Feature dict whose turn probes (the costly entries) are computed on first access."""

    _LAZY = ("open_left", "open_right", "explore_turns")

    def __init__(self, values: dict, obs=None, turn_deg: float = 15.0, visits: Mapping | None = None):
        self._values = values
        self._obs = obs
        self._turn_deg = turn_deg
        self._visits = visits if visits is not None else {}

    def __getitem__(self, key):
        if key not in self._values and key in self._LAZY and self._obs is not None:
            if key == "explore_turns":
                self._values[key] = explore_turns(self._obs, self._visits, self._turn_deg)
            elif self._values.get("forward_free", 1):
                self._values[key] = 0
            else:
                self._values[key] = open_turns(self._obs, -1 if key == "open_left" else 1, self._turn_deg)
        return self._values[key]

    def __iter__(self):
        return iter(FEATURES if self._obs is not None else self._values)

    def __len__(self) -> int:
        return len(FEATURES) if self._obs is not None else len(self._values)

    def to_dict(self) -> dict:
        return {k: self[k] for k in self}


@dataclass
class FeatureTracker:
    """Builds the feature dict for each step of one episode; reset by ``begin``."""

    turn_deg: float = 15.0

    def __post_init__(self):
        self.begin()

    def begin(self) -> None:
        self.arrivals: deque = deque()  # (step, cell) for the start and each MoveForward attempt
        self.visits: Counter = Counter()  # arrivals per cell over the whole episode
        self.dists: deque = deque(maxlen=PROGRESS_WINDOW + 1)
        self.coll: deque = deque(maxlen=COLLISION_WINDOW)
        self.best = float("inf")
        self.since_best = 0
        self.prev_pos = None

    def observe(self, obs, last_action=None) -> Features:
        """Fold one observation (the result of ``last_action``) into the history and return features."""
        bumped = last_action is not None and last_action.name == "MoveForward" and (obs.x, obs.y) == self.prev_pos
        if last_action is not None:
            self.coll.append(1 if bumped else 0)
        if last_action is None or last_action.name == "MoveForward":
            self.arrivals.append((obs.step_count, obs.cell))
            self.visits[obs.cell] += 1
        while self.arrivals and self.arrivals[0][0] <= obs.step_count - REVISIT_WINDOW:
            self.arrivals.popleft()
        self.dists.append(obs.distance)
        if obs.distance < self.best - 1e-9:
            self.best = obs.distance
            self.since_best = 0
        else:
            self.since_best += 1
        self.prev_pos = (obs.x, obs.y)
        return Features({
            "bearing": obs.bearing,
            "abs_bearing": abs(obs.bearing),
            "distance": obs.distance,
            "forward_free": 1 if obs.forward_free else 0,
            "clutter": obs.clutter,
            "steps": obs.step_count,
            "revisits": sum(1 for _, c in self.arrivals if c == obs.cell),
            "recent_collisions": sum(self.coll),
            "stalled": self.since_best,
            "progress": self.dists[0] - obs.distance,
        }, obs, self.turn_deg, self.visits)
