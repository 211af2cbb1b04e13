"""Template rule synthesizer: one targeted rule per observed failure, conditioned on where it happened.

Each failure category maps to a canned rule shape. Rules are restricted to
the situation in which the failure was observed (by default the local clutter
tier), so a lesson learned in dense surroundings does not fire in the open.

Stalls are handled by escalation. The first Timeout yields an unconditioned
rule that switches to exploration after ``stall_steps`` steps without
progress. A later Timeout that an existing exploration rule already covered
means the lesson was too weak there, so a rule with half the threshold is
added for that clutter tier, down to ``stall_floor``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

from .failures import FailureMode
from .rules import Atom, Rule, RuleList

# local clutter tiers (fraction of blocked cells in the 13 x 13 window around the agent)
CLUTTER_TIERS = (("open", 0.0, 0.10), ("light", 0.10, 0.20), ("dense", 0.20, 0.35), ("packed", 0.35, None))

# remaining geodesic distance bands in metres (same cut points as the memory's path-length tiers)
DISTANCE_BANDS = (("near", 0.0, 8.0), ("mid", 8.0, 18.0), ("far", 18.0, None))


def _band(table, value: float) -> str:
    for name, lo, hi in table:
        if value >= lo and (hi is None or value < hi):
            return name
    return table[0][0]


def _band_atoms(table, feature: str, name: str) -> tuple[Atom, ...]:
    for n, lo, hi in table:
        if n == name:
            atoms = (Atom(feature, ">=", lo),) if lo > 0 else ()
            return atoms + ((Atom(feature, "<", hi),) if hi is not None else ())
    raise ValueError(f"unknown {feature} band {name!r}")


def distance_band(distance_m: float) -> str:
    return _band(DISTANCE_BANDS, distance_m)


def clutter_tier(clutter: float) -> str:
    return _band(CLUTTER_TIERS, clutter)


SITUATION_TABLES = {"clutter": CLUTTER_TIERS, "distance": DISTANCE_BANDS}


def situation(context: dict, features: tuple[str, ...] = ("clutter", "distance")) -> tuple[str, tuple[Atom, ...]]:
    """Situation key (band names joined by ``-``) and its condition atoms for a failure context."""
    names, atoms = [], ()
    for feat in features:
        table = SITUATION_TABLES[feat]
        band = _band(table, context.get(feat, 0.0))
        names.append(band)
        atoms += _band_atoms(table, feat, band)
    return "-".join(names) or "any", atoms


@dataclass(frozen=True)
class TemplateConfig:
    loop_revisits: int = 3
    escape_forward: int = 2
    goal_stop_m: float = 0.99
    align_bearing_deg: float = 30.0
    detour_forward: int = 4
    stall_steps: int = 10
    stall_floor: int = 3
    situation: tuple[str, ...] = ("clutter",)


class Synthesizer(Protocol):
    def __call__(self, failures: Sequence[FailureMode], current: RuleList, episode_index: int,
                 context: dict | None = None) -> list[Rule]: ...


def _template(f: FailureMode, cfg: TemplateConfig) -> Rule | None:
    tier, t = situation(f.context, cfg.situation)
    if f.category == "Loop":
        return Rule(f"loop-{tier}", (Atom("revisits", ">=", cfg.loop_revisits),) + t,
                    f"escape:{cfg.escape_forward}", note="two TurnRight to break a revisit loop")
    if f.category == "GoalProximity":
        return Rule("goal-any", (Atom("distance", "<", cfg.goal_stop_m),), "Stop",
                    note="stop as soon as the goal is inside the success radius")
    if f.category == "Directional":
        return Rule(f"align-{tier}", (Atom("abs_bearing", "<=", cfg.align_bearing_deg),
                                      Atom("forward_free", "==", 1)) + t,
                    "MoveForward", note="prefer forward when roughly aligned and clear")
    if f.category == "ObstacleAvoidance":
        return Rule(f"avoid-{tier}", (Atom("forward_free", "==", 0), Atom("recent_collisions", ">=", 1)) + t,
                    f"detour:{cfg.detour_forward}", note="sidestep toward the nearer open heading")
    return None


def _stall_threshold(rule: Rule, context: dict) -> int | None:
    """The rule's ``stalled >=`` threshold if it is an exploration rule whose other atoms hold in ``context``."""
    if rule.directive != "explore":
        return None
    th = None
    for a in rule.condition:
        if a.feature == "stalled" and a.op == ">=":
            th = int(a.value)
        elif a.feature not in context or not a.holds(context):
            return None
    return th


def _stall_rule(f: FailureMode, rules: Sequence[Rule], cfg: TemplateConfig) -> Rule | None:
    covering = [th for r in rules if (th := _stall_threshold(r, f.context)) is not None]
    note = "explore toward less visited cells while no progress is being made"
    if not covering:
        return Rule("stall-any", (Atom("stalled", ">=", cfg.stall_steps),), "explore", note=note)
    current = min(covering)
    if current <= cfg.stall_floor:
        return None
    th = max(cfg.stall_floor, current // 2)
    tier, t = situation(f.context, ("clutter",))
    return Rule(f"stall-{tier}-{th}", (Atom("stalled", ">=", th),) + t, "explore",
                note=f"{note}; tightened after a stall the looser rule did not prevent")


def template_synthesizer(failures: Sequence[FailureMode], current: RuleList, episode_index: int,
                         context: dict | None = None, config: TemplateConfig = TemplateConfig()) -> list[Rule]:
    """New rules for ``failures``; skips ids already present and rules contradicting existing ones."""
    existing = list(current.rules)
    out: list[Rule] = []
    for f in failures:
        rule = _stall_rule(f, existing + out, config) if f.category == "Timeout" else _template(f, config)
        if rule is None:
            continue
        rule.last_active_episode = episode_index
        if any(r.id == rule.id for r in existing + out):
            continue
        if any(rule.contradicts(r) for r in existing + out):
            continue
        out.append(rule)
    return out


def make_template_synthesizer(config: TemplateConfig) -> Callable[..., list[Rule]]:
    def synth(failures, current, episode_index, context=None):
        return template_synthesizer(failures, current, episode_index, context, config)
    return synth
