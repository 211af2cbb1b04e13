"""Policies: shortest-path oracle, greedy baseline, always-turn null agent, rule-list agent, remote agent."""

from __future__ import annotations

import json
import math
import socket
from collections import deque
from dataclasses import dataclass

from ..env import Action, EnvConfig, NavEnv, Observation
from ..navgrid import Episode, OccupancyGrid
from .features import FeatureTracker
from .rules import RuleList, expand_directive, rule_policy_act

GREEDY_STOP_M = 0.9
GREEDY_ALIGN_DEG = 22.5
HEADINGS = 24  # 360 / 15
ORACLE_ALIGN_DEG = 15.0  # same cut as the Directional failure test, so the oracle never turns while aligned


class OracleBudgetError(RuntimeError):
    pass


def greedy_policy(obs: Observation, history=None) -> Action:
    """Memoryless baseline: stop near the goal, go forward when aligned and clear, else turn toward the goal."""
    if obs.distance < GREEDY_STOP_M:
        return Action.Stop
    if abs(obs.bearing) <= GREEDY_ALIGN_DEG and obs.forward_free:
        return Action.MoveForward
    return Action.TurnLeft if obs.bearing < 0 else Action.TurnRight


class GreedyPolicy:
    name = "greedy"

    def begin(self, env: NavEnv, episode: Episode) -> None:
        pass

    def act(self, obs: Observation) -> Action:
        return greedy_policy(obs)


class NullPolicy:
    """Always turns left; never moves and never stops."""

    name = "null"

    def begin(self, env: NavEnv, episode: Episode) -> None:
        pass

    def act(self, obs: Observation) -> Action:
        return Action.TurnLeft


class OraclePolicy:
    """Privileged agent descending the env's geodesic distance field.

    Among the headings reachable by turning, it picks the one whose 25 cm move
    lands on the cell with the smallest field value, provided that value is
    strictly below the current one (fewest turns, then right, breaks ties).
    When the goal bearing is within ORACLE_ALIGN_DEG and the forward move is
    free and either decreases the field or stays inside the current cell, it
    moves forward instead of turning toward a slightly better diagonal. Every
    move lowers the field or, within a cell, the straight-line distance to the
    goal, and on a 15-degree heading lattice an axis-aligned move always lowers
    the field, so the agent cannot cycle and reaches the goal on any solvable
    episode.
    """

    name = "oracle"

    def __init__(self):
        self.env: NavEnv | None = None

    def begin(self, env: NavEnv, episode: Episode) -> None:
        self.env = env

    def choose(self, obs: Observation) -> Action:
        env = self.env
        field = env.field
        grid = env.grid
        here = field[obs.cell]
        if here < env.config.success_distance_m * 100.0:
            return Action.Stop
        ahead = obs.cell_ahead()
        if obs.forward_free and abs(obs.bearing) <= ORACLE_ALIGN_DEG and (field[ahead] < here or ahead == obs.cell):
            return Action.MoveForward
        best = None
        step = env.config.step_cm
        for j in sorted(range(-HEADINGS // 2 + 1, HEADINGS // 2 + 1), key=lambda j: (abs(j), -j)):
            rad = math.radians(obs.yaw + j * env.config.turn_deg)
            dest = grid.cell_of(obs.x + step * math.cos(rad), obs.y + step * math.sin(rad))
            if not grid.can_step(obs.cell, dest):
                continue
            v = field[dest]
            if v < here and (best is None or v < best[0]):
                best = (v, j)
        if best is None:
            # no improving heading: only possible off the heading lattice or on an unreachable cell
            return Action.TurnRight
        j = best[1]
        if j == 0:
            return Action.MoveForward
        return Action.TurnLeft if j < 0 else Action.TurnRight

    def act(self, obs: Observation) -> Action:
        return self.choose(obs)


def oracle_actions(grid: OccupancyGrid, episode: Episode, config: EnvConfig = EnvConfig()) -> list[Action]:
    """The oracle's full action sequence; raises OracleBudgetError if the step budget runs out first."""
    env = NavEnv(grid, config)
    obs = env.reset(episode)
    pol = OraclePolicy()
    pol.begin(env, episode)
    out = []
    while not env.done:
        a = pol.act(obs)
        out.append(a)
        obs = env.step(a).observation
    if not env.success:
        raise OracleBudgetError(f"episode {episode.id}: oracle needs more than {config.max_steps} steps "
                                f"(stopped={env.stopped}, final distance {env.distance_cm(env.x, env.y)[0]:.1f} cm)")
    return out


@dataclass
class RuleAgent:
    """Rule list over the greedy fallback. Macro directives queue their actions and run to completion,
    except that a queued MoveForward into a blocked cell ends the macro, and so does entering the success radius."""

    rules: RuleList
    episode_index: int = 0
    success_distance_m: float = 1.0
    name: str = "rules"

    def __post_init__(self):
        self.tracker = FeatureTracker()
        self.queue: deque = deque()
        self.last_fired: str | None = None
        self._macro_id: str | None = None
        self._last_action: Action | None = None
        self.context = None

    def begin(self, env: NavEnv | None, episode: Episode | None) -> None:
        self.tracker.begin()
        self.queue.clear()
        self.last_fired = None
        self._macro_id = None
        self._last_action = None

    def act(self, obs: Observation) -> Action:
        feats = self.tracker.observe(obs, self._last_action)
        if self.queue:
            nxt = self.queue[0]
            if obs.distance < self.success_distance_m or (nxt == Action.MoveForward and not obs.forward_free):
                self.queue.clear()
            else:
                self.queue.popleft()
                self.last_fired = self._macro_id
                self._last_action = nxt
                return nxt
        fallback = greedy_policy(obs)
        directive, rid = rule_policy_act(self.rules, feats, fallback.name, self.episode_index)
        actions = expand_directive(directive, feats) if rid is not None else [fallback]
        if not actions:
            actions = [fallback]
        self.queue.extend(actions[1:])
        self._macro_id = rid
        self.last_fired = rid
        self._last_action = actions[0]
        return actions[0]


class ExternalPolicy:
    """Policy served by another process speaking the NDJSON tool protocol (tool name ``act``).

    The request carries the observation scalars and pose; the response payload
    must contain ``{"action": <name>}``.
    """

    name = "external"

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host, self.port, self.timeout = host, port, timeout
        self._sock = None
        self._file = None
        self._next_id = 1

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise ConnectionError(f"external policy at {self.host}:{self.port} unreachable: {exc}") from exc
            self._file = self._sock.makefile("rwb")

    def close(self) -> None:
        if self._sock is not None:
            self._file.close()
            self._sock.close()
            self._sock = self._file = None

    def _call(self, tool: str, args: dict) -> dict:
        self._connect()
        req = {"id": self._next_id, "tool": tool, "args": args}
        self._next_id += 1
        self._file.write((json.dumps(req) + "\n").encode())
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ConnectionError("external policy closed the connection")
        resp = json.loads(line)
        if not resp.get("ok"):
            raise RuntimeError(f"external policy error: {resp.get('error')}")
        return resp["payload"]

    def begin(self, env: NavEnv, episode: Episode) -> None:
        self._call("begin", {"episode": episode.to_dict()})

    def act(self, obs: Observation) -> Action:
        payload = self._call("act", {"observation": {**obs.scalars(), "pose": [obs.x, obs.y, obs.yaw]}})
        return Action.parse(payload["action"])


def policy_extensions(policy_factory) -> dict:
    """Tool-server extension handlers that expose a local policy as ``begin`` / ``act`` tools.

    ``act`` sees only the scalars a remote client sends, so the served policy
    must be one that decides from scalars (greedy, null or a rule agent without
    turn-probe rules).
    """
    state = {"policy": None}

    class _Obs:
        def __init__(self, d):
            self.bearing = float(d["bearing"])
            self.distance = float(d["distance_m"])
            self.step_count = int(d.get("step_count", 0))
            self.forward_free = bool(d["forward_free"])
            self.clutter = float(d.get("clutter", 0.0))
            self.x, self.y, self.yaw = (list(d.get("pose", [0.0, 0.0, 0.0])) + [0.0] * 3)[:3]
            self.cell = (0, 0)

        def heading_free(self, offset_deg):
            return offset_deg == 0 and self.forward_free

    def begin(session, args):
        state["policy"] = policy_factory()
        state["policy"].begin(None, None)
        return {"ok": True}

    def act(session, args):
        if state["policy"] is None:
            begin(session, args)
        return {"action": Action.parse(state["policy"].act(_Obs(args["observation"]))).name}

    return {"begin": begin, "act": act}
