"""Executable decision rules: a closed predicate grammar, first-match evaluation and list maintenance.

A condition is a conjunction of atoms ``(feature, op, value)`` over the
features in ``features.FEATURES``. A directive is either a primitive action
name or a macro ``name:k`` that expands, at the moment the rule fires, into a
short fixed action sequence.
"""

from __future__ import annotations

import json
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from ..env import Action
from .features import FEATURES, MAX_PROBE_TURNS, NO_HEADING

RULE_CAP = 30
PRUNE_AFTER = 20

OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge, "==": operator.eq}
ACTIONS = tuple(a.name for a in Action)
MACROS = ("escape", "detour", "commit", "explore")
MAX_MACRO_ARG = 20


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class Atom:
    feature: str
    op: str
    value: float

    def __post_init__(self):
        if self.feature not in FEATURES:
            raise RuleError(f"unknown feature {self.feature!r}")
        if self.op not in OPS:
            raise RuleError(f"unknown operator {self.op!r}")
        if isinstance(self.value, bool) or not isinstance(self.value, (int, float)):
            raise RuleError(f"atom value must be a number, got {self.value!r}")

    def holds(self, features: Mapping) -> bool:
        return OPS[self.op](features[self.feature], self.value)

    def to_list(self) -> list:
        return [self.feature, self.op, self.value]

    def __str__(self) -> str:
        return f"{self.feature} {self.op} {self.value:g}"


def parse_directive(directive: str) -> tuple[str, int]:
    """Split a directive into (name, argument); primitive actions have argument 0."""
    if directive in ACTIONS:
        return directive, 0
    name, _, arg = directive.partition(":")
    if name not in MACROS:
        raise RuleError(f"unknown directive {directive!r}")
    try:
        k = int(arg) if arg else 0
    except ValueError:
        raise RuleError(f"macro argument must be an integer in {directive!r}") from None
    if not 0 <= k <= MAX_MACRO_ARG:
        raise RuleError(f"macro argument out of range in {directive!r}")
    return name, k


def _turn_to_open(features: Mapping) -> list[Action]:
    left, right = features["open_left"], features["open_right"]
    if left < right:
        return [Action.TurnLeft] * int(left)
    return [Action.TurnRight] * int(min(right, MAX_PROBE_TURNS))


def expand_directive(directive: str, features: Mapping) -> list[Action]:
    """Concrete action sequence for a directive, given the features at the firing step.

    escape:k  two TurnRight then k MoveForward
    detour:k  turn toward the nearer open heading (ties go right) then k MoveForward
    commit:k  k MoveForward if the way ahead is open, otherwise a detour:k
    explore   one step toward the least-entered neighbouring cell (the argument is ignored)
    """
    name, k = parse_directive(directive)
    if name in ACTIONS:
        return [Action[name]]
    if name == "explore":
        j = features["explore_turns"]
        if j == NO_HEADING or j > 0:
            return [Action.TurnRight]
        return [Action.MoveForward] if j == 0 else [Action.TurnLeft]
    forward = [Action.MoveForward] * k
    if name == "escape":
        return [Action.TurnRight, Action.TurnRight] + forward
    if name == "commit" and features["forward_free"]:
        return forward or [Action.MoveForward]
    return _turn_to_open(features) + forward


@dataclass
class Rule:
    id: str
    condition: tuple[Atom, ...]
    directive: str
    activation_count: int = 0
    last_active_episode: int = 0
    note: str = ""

    def __post_init__(self):
        self.condition = tuple(self.condition)
        parse_directive(self.directive)
        if not self.id:
            raise RuleError("rule id must be nonempty")

    def matches(self, features: Mapping) -> bool:
        return all(a.holds(features) for a in self.condition)

    def contradicts(self, other: "Rule") -> bool:
        return set(self.condition) == set(other.condition) and self.directive != other.directive

    def to_dict(self) -> dict:
        return {"id": self.id, "condition": [a.to_list() for a in self.condition], "directive": self.directive,
                "activation_count": self.activation_count, "last_active_episode": self.last_active_episode,
                "note": self.note}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Rule":
        try:
            return cls(str(d["id"]), tuple(Atom(*a) for a in d["condition"]), str(d["directive"]),
                       int(d.get("activation_count", 0)), int(d.get("last_active_episode", 0)),
                       str(d.get("note", "")))
        except (KeyError, TypeError) as exc:
            raise RuleError(f"malformed rule {d!r}: {exc}") from None

    def __str__(self) -> str:
        cond = " and ".join(map(str, self.condition)) or "always"
        return f"[{self.id}] if {cond} -> {self.directive}"


@dataclass
class RuleList:
    rules: list[Rule] = field(default_factory=list)
    cap: int = RULE_CAP

    def __post_init__(self):
        if len(self.rules) > self.cap:
            raise RuleError(f"rule list exceeds cap {self.cap}")
        ids = [r.id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise RuleError("duplicate rule ids")

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rules]

    def first_match(self, features: Mapping) -> int | None:
        for i, r in enumerate(self.rules):
            if r.matches(features):
                return i
        return None

    def to_json(self) -> str:
        return json.dumps({"cap": self.cap, "rules": [r.to_dict() for r in self.rules]}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RuleList":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RuleError(f"rule file is not JSON: {exc}") from None
        if isinstance(d, list):
            d = {"rules": d}
        return cls([Rule.from_dict(r) for r in d.get("rules", [])], int(d.get("cap", RULE_CAP)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RuleList":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def clone(self) -> "RuleList":
        return RuleList.from_json(self.to_json())


def rule_policy_act(rules: RuleList, features: Mapping, fallback: str, episode: int = 0) -> tuple[str, str | None]:
    """Directive of the first rule whose condition holds (updating its activation stats), else ``fallback``."""
    i = rules.first_match(features)
    if i is None:
        return fallback, None
    r = rules.rules[i]
    r.activation_count += 1
    r.last_active_episode = max(r.last_active_episode, episode)
    return r.directive, r.id


def update_rules(rules: RuleList, new_rules: Sequence[Rule], episode_index: int,
                 prune_after: int = PRUNE_AFTER) -> RuleList:
    """Prune stale rules, append ``new_rules`` in order after the survivors, and drop the newest beyond the cap.

    A rule is stale when ``last_active_episode <= episode_index - prune_after``.
    New rules whose id is already present are skipped.
    """
    survivors = [r for r in rules.rules if r.last_active_episode > episode_index - prune_after]
    seen = {r.id for r in survivors}
    out = list(survivors)
    for r in new_rules:
        if r.id in seen:
            continue
        seen.add(r.id)
        out.append(r)
    return RuleList(out[:rules.cap], rules.cap)
