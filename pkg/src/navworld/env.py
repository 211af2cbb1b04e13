"""Step/reset navigation environment compiled from an occupancy grid and an episode.

Yaw is in degrees measured from +x toward +y; TurnLeft decreases it and
TurnRight increases it, and a goal to the left of the heading has a
negative bearing. Distances to the goal are geodesic, read from a distance
field computed once per reset.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Protocol

import numpy as np

from .metrics import TrajectoryRecord
from .navgrid import LABEL_OUTSIDE, LABELS, Episode, OccupancyGrid
from .raster import GRAY_LEVELS
from .scene import normalize_angle


class Action(IntEnum):
    MoveForward = 0
    TurnLeft = 1
    TurnRight = 2
    Stop = 3

    @classmethod
    def parse(cls, v) -> "Action":
        if isinstance(v, Action):
            return v
        if isinstance(v, str):
            key = v.replace("_", "").lower()
            for a in cls:
                if a.name.lower() == key:
                    return a
            raise ValueError(f"unknown action {v!r}")
        return cls(int(v))


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 40
    success_distance_m: float = 1.0
    step_cm: float = 25.0
    turn_deg: float = 15.0
    step_penalty: float = 0.01
    success_bonus: float = 1.0
    raster_size: int = 224

    def __post_init__(self):
        if self.max_steps < 1 or self.step_cm <= 0 or self.turn_deg <= 0 or self.raster_size < 1:
            raise ValueError("invalid environment config")


COEVOLVE_CONFIG = EnvConfig(max_steps=500)

# raster codes: free ground 0, per-category gray, outside-the-grid white
_RASTER_LUT = np.zeros(256, dtype=np.uint8)
for _cat, _code in LABELS.items():
    _RASTER_LUT[_code] = GRAY_LEVELS[_cat]
_RASTER_LUT[LABEL_OUTSIDE] = 255


def compute_reward(prev_d: float, new_d: float, d0: float, success: bool, config: EnvConfig = EnvConfig()) -> float:
    """Progress toward the goal normalised by d0, minus a step cost, plus a bonus on a successful Stop."""
    if d0 <= 0:
        raise ValueError("d0 must be > 0")
    return (prev_d - new_d) / d0 - config.step_penalty + (config.success_bonus if success else 0.0)


def bearing_to(x: float, y: float, yaw: float, gx: float, gy: float) -> float:
    return normalize_angle(math.degrees(math.atan2(gy - y, gx - x)) - yaw)


def ego_raster(grid: OccupancyGrid, x: float, y: float, yaw: float, size: int = 224) -> np.ndarray:
    """Egocentric top-down window, one grid cell per pixel, heading up and right-hand side to the right."""
    cs = grid.cell_size
    rad = math.radians(yaw)
    fx, fy = math.cos(rad), math.sin(rad)
    rx, ry = -fy, fx
    half = size / 2
    fwd = (half - np.arange(size) - 0.5) * cs  # row 0 is furthest ahead
    right = (np.arange(size) - half + 0.5) * cs
    wx = x + fwd[:, None] * fx + right[None, :] * rx
    wy = y + fwd[:, None] * fy + right[None, :] * ry
    cols = np.floor((wx - grid.origin[0]) / cs).astype(np.int64)
    rows = np.floor((wy - grid.origin[1]) / cs).astype(np.int64)
    inside = (rows >= 0) & (rows < grid.height) & (cols >= 0) & (cols < grid.width)
    codes = np.full((size, size), LABEL_OUTSIDE, dtype=np.uint8)
    codes[inside] = grid.labels[rows[inside], cols[inside]]
    return _RASTER_LUT[codes]


class Observation:
    """Scalars are computed eagerly; the ego raster is rendered on first access."""

    __slots__ = ("bearing", "distance", "step_count", "forward_free", "clutter", "x", "y", "yaw", "cell",
                 "unreachable", "_grid", "_size", "_raster", "_step_cm")

    def __init__(self, grid: OccupancyGrid, x: float, y: float, yaw: float, bearing: float, distance: float,
                 step_count: int, forward_free: bool, unreachable: bool = False, raster_size: int = 224,
                 step_cm: float = 25.0):
        self._grid = grid
        self._step_cm = step_cm
        self.x, self.y, self.yaw = x, y, yaw
        self.cell = grid.cell_of(x, y)
        self.bearing = bearing
        self.distance = distance
        self.step_count = step_count
        self.forward_free = forward_free
        self.clutter = float(grid.clutter[self.cell]) if grid.inside(*self.cell) else 1.0
        self.unreachable = unreachable
        self._size = raster_size
        self._raster = None

    @property
    def ego_raster(self) -> np.ndarray:
        if self._raster is None:
            self._raster = ego_raster(self._grid, self.x, self.y, self.yaw, self._size)
        return self._raster

    def cell_ahead(self, offset_deg: float = 0.0) -> tuple[int, int]:
        """Cell a MoveForward would land on after turning by ``offset_deg``."""
        rad = math.radians(self.yaw + offset_deg)
        return self._grid.cell_of(self.x + self._step_cm * math.cos(rad), self.y + self._step_cm * math.sin(rad))

    def heading_free(self, offset_deg: float) -> bool:
        """Would a MoveForward after turning by ``offset_deg`` succeed? (Same test the env applies.)"""
        return self._grid.can_step(self.cell, self.cell_ahead(offset_deg))

    def scalars(self) -> dict:
        return {"bearing": self.bearing, "distance_m": self.distance, "step_count": self.step_count,
                "forward_free": self.forward_free, "clutter": self.clutter}


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    truncated: bool
    info: dict


class NavEnv:
    """Single-agent discrete navigation environment; one instance per thread."""

    def __init__(self, grid: OccupancyGrid, config: EnvConfig = EnvConfig()):
        self.grid = grid
        self.config = config
        self.episode: Episode | None = None
        self.field: np.ndarray | None = None
        self._field_key = None
        self.done = True

    # -- helpers ------------------------------------------------------------

    def _goal_cell(self, ep: Episode) -> tuple[int, int]:
        cell = self.grid.cell_of(*ep.goal_xy)
        return cell if self.grid.free(*cell) else self.grid.nearest_free(*cell)

    def distance_cm(self, x: float, y: float) -> tuple[float, bool]:
        d = float(self.field[self.grid.cell_of(x, y)])
        if math.isfinite(d):
            return d, False
        gx, gy = self.episode.goal_xy
        return math.hypot(gx - x, gy - y), True

    def _forward_target(self) -> tuple[float, float]:
        rad = math.radians(self.yaw)
        return self.x + self.config.step_cm * math.cos(rad), self.y + self.config.step_cm * math.sin(rad)

    def forward_free(self) -> bool:
        nx, ny = self._forward_target()
        return self.grid.can_step(self.grid.cell_of(self.x, self.y), self.grid.cell_of(nx, ny))

    def _observe(self) -> Observation:
        d, unreachable = self.distance_cm(self.x, self.y)
        gx, gy = self.episode.goal_xy
        return Observation(self.grid, self.x, self.y, self.yaw, bearing_to(self.x, self.y, self.yaw, gx, gy),
                           d / 100.0, self.steps, self.forward_free(), unreachable, self.config.raster_size,
                           self.config.step_cm)

    def _log(self, action: Action | None, reward: float, flags: dict) -> None:
        self.log.append({"step": self.steps, "action": None if action is None else action.name,
                         "pose": [self.x, self.y, self.yaw], "bearing": self.obs.bearing,
                         "distance_m": self.obs.distance, "reward": reward, "flags": flags})

    # -- API ----------------------------------------------------------------

    def reset(self, episode: Episode, seed: int | None = None) -> Observation:
        """Place the agent at the episode start. The environment has no stochastic dynamics; ``seed`` is recorded."""
        sx, sy, _, syaw = episode.start
        if not self.grid.free_at(sx, sy):
            raise EnvError(f"episode {episode.id}: start ({sx}, {sy}) is not on a free cell of this grid")
        if episode.d0 <= 0 and episode.L_star > 0:
            raise EnvError("episode d0 must be positive")
        self.episode = episode
        goal = self._goal_cell(episode)
        if self._field_key != goal:
            self.field = self.grid.distance_field(goal)
            self._field_key = goal
        self.x, self.y, self.yaw = float(sx), float(sy), normalize_angle(float(syaw))
        self.steps = 0
        self.seed = seed
        self.done = False
        self.success = False
        self.stopped = False
        self.truncated = False
        self.collisions: list[tuple[int, tuple[int, int]]] = []
        self.log: list[dict] = []
        self.positions = [(self.x, self.y)]
        self.obs = self._observe()
        self._log(None, 0.0, {"collision": False, "success": False, "terminated": False, "truncated": False})
        return self.obs

    def step(self, action) -> StepResult:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset() first")
        action = Action.parse(action)
        cfg = self.config
        prev_d, _ = self.distance_cm(self.x, self.y)
        collision = False
        terminated = False
        success = False
        if action == Action.MoveForward:
            nx, ny = self._forward_target()
            a, b = self.grid.cell_of(self.x, self.y), self.grid.cell_of(nx, ny)
            if self.grid.can_step(a, b):
                self.x, self.y = nx, ny
            else:
                collision = True
                self.collisions.append((self.steps, b))
        elif action == Action.TurnLeft:
            self.yaw = normalize_angle(self.yaw - cfg.turn_deg)
        elif action == Action.TurnRight:
            self.yaw = normalize_angle(self.yaw + cfg.turn_deg)
        self.steps += 1
        new_d, unreachable = self.distance_cm(self.x, self.y)
        if action == Action.Stop:
            terminated = True
            success = new_d < cfg.success_distance_m * 100.0
        truncated = self.steps >= cfg.max_steps
        d0 = self.episode.d0 if self.episode.d0 > 0 else 1.0
        reward = compute_reward(prev_d, new_d, d0, success, cfg)
        self.positions.append((self.x, self.y))
        self.done = terminated or truncated
        self.success, self.stopped, self.truncated = success, terminated, truncated and not terminated
        self.obs = self._observe()
        flags = {"collision": collision, "success": success, "terminated": terminated, "truncated": truncated}
        self._log(action, reward, flags)
        info = {"success": success, "d": new_d / 100.0, "collision": collision, "unreachable": unreachable}
        return StepResult(self.obs, reward, terminated, truncated, info)

    def trajectory_record(self) -> TrajectoryRecord:
        final_d, _ = self.distance_cm(self.x, self.y)
        ep = self.episode
        return TrajectoryRecord.from_positions(self.positions, final_d, [tuple(w) for w in ep.reference_path],
                                               ep.L_star, ep.d0, self.config.success_distance_m * 100.0,
                                               episode_id=ep.id)

    def log_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.log, separators=(",", ":")).encode()).hexdigest()


class Policy(Protocol):
    def begin(self, env: NavEnv, episode: Episode) -> None: ...

    def act(self, obs: Observation) -> Action: ...


@dataclass
class Rollout:
    episode_id: str
    actions: list[str]
    log: list[dict]
    record: TrajectoryRecord
    success: bool
    stopped: bool
    truncated: bool
    collisions: list[tuple[int, tuple[int, int]]]
    cells: list[tuple[int, int]]
    features: list[dict] = field(default_factory=list)  # observation scalars before each action
    fired: list[str | None] = field(default_factory=list)  # rule ids (None = fallback) per step

    @property
    def steps(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {"episode_id": self.episode_id, "success": self.success, "stopped": self.stopped,
                "truncated": self.truncated, "steps": self.steps, "actions": self.actions,
                "record": self.record.to_dict(), "log": self.log}


def rollout(env: NavEnv, policy, episode: Episode, seed: int | None = None,
            on_step: Callable[[Observation, Action], None] | None = None) -> Rollout:
    obs = env.reset(episode, seed)
    if hasattr(policy, "begin"):
        policy.begin(env, episode)
    actions, feats, cells, fired = [], [], [], []
    while not env.done:
        cells.append(obs.cell)
        feats.append(obs.scalars())
        a = Action.parse(policy.act(obs))
        fired.append(getattr(policy, "last_fired", None))
        if on_step is not None:
            on_step(obs, a)
        actions.append(a.name)
        obs = env.step(a).observation
    cells.append(obs.cell)
    return Rollout(episode.id, actions, env.log, env.trajectory_record(), env.success, env.stopped,
                   env.truncated, list(env.collisions), cells, feats, fired)
