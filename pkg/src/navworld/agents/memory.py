"""Three-level experience memory.

L1 keeps each episode's step records, run-length compressed at flush time.
L2 keeps one tagged summary per episode. L3 holds principles distilled from
recent L2 records every ``distill_every`` episodes.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

DISTILL_EVERY = 10
DISTILL_WINDOW = 50  # most recent L2 records a distillation looks at
TAG_WEIGHTS = {"density": 2, "length": 1, "archetype": 1}


def density_tier(density: float) -> str:
    if density <= 0:
        return "none"
    if density <= 0.10:
        return "low"
    if density <= 0.20:
        return "mid"
    return "high"


def length_tier(L_star: float) -> str:
    if L_star < 800:
        return "short"
    if L_star < 1800:
        return "medium"
    return "long"


def env_tags(density: float, L_star: float, archetype: str = "") -> dict:
    return {"density": density_tier(density), "length": length_tier(L_star), "archetype": archetype}


def compress_actions(actions: Sequence[str]) -> list[list]:
    """Run-length encoding ``[[action, count], ...]``."""
    runs: list[list] = []
    for a in actions:
        if runs and runs[-1][0] == a:
            runs[-1][1] += 1
        else:
            runs.append([a, 1])
    return runs


def expand_actions(runs: Sequence[Sequence]) -> list[str]:
    return [a for a, n in runs for _ in range(int(n))]


@dataclass
class L2Record:
    episode_index: int
    episode_id: str
    tags: dict
    success: bool
    steps: int
    failures: list[str]
    summary: str

    def score(self, want: dict) -> int:
        return sum(w for k, w in TAG_WEIGHTS.items() if want.get(k) is not None and self.tags.get(k) == want[k])


@dataclass
class MemoryBundle:
    records: list[L2Record] = field(default_factory=list)
    principles: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.records and not self.principles

    def render(self) -> str:
        lines = [f"- {p}" for p in self.principles] + [f"* {r.summary}" for r in self.records]
        return "\n".join(lines)


def frequency_distiller(records: Sequence[L2Record]) -> list[str]:
    """Per density tier: success rate and the most frequent failure categories, most frequent tier first."""
    by_tier: dict[str, list[L2Record]] = {}
    for r in records:
        by_tier.setdefault(r.tags.get("density", "?"), []).append(r)
    out = []
    for tier, recs in sorted(by_tier.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        wins = sum(r.success for r in recs)
        counts = Counter(c for r in recs for c in r.failures)
        top = ", ".join(f"{c} x{n}" for c, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3])
        out.append(f"{tier} obstacle density: {wins}/{len(recs)} solved" + (f"; watch for {top}" if top else ""))
    return out


@dataclass
class MemoryStore:
    L1: dict[str, list[list]] = field(default_factory=dict)
    L2: list[L2Record] = field(default_factory=list)
    L3: list[str] = field(default_factory=list)
    distillations: list[int] = field(default_factory=list)
    distill_every: int = DISTILL_EVERY

    def update(self, actions: Sequence[str], episode_id: str, tags: dict, success: bool, failures: Sequence[str],
               episode_index: int, distiller: Callable[[Sequence[L2Record]], list[str]] = frequency_distiller) -> bool:
        """L1 flush, L2 summary, and L3 distillation when ``episode_index`` (1-based) is a multiple of the cadence.

        Returns True when a distillation happened.
        """
        if episode_index < 1:
            raise ValueError("episode_index is 1-based")
        self.L1[episode_id] = compress_actions(actions)
        outcome = "solved" if success else "failed"
        why = f" ({', '.join(failures)})" if failures else ""
        summary = (f"{outcome} in {len(actions)} steps on a {tags.get('length')} path with "
                   f"{tags.get('density')} obstacle density{why}")
        self.L2.append(L2Record(episode_index, episode_id, dict(tags), bool(success), len(actions),
                                list(failures), summary))
        if episode_index % self.distill_every == 0:
            self.L3 = distiller(self.L2[-DISTILL_WINDOW:])
            self.distillations.append(episode_index)
            return True
        return False

    def retrieve(self, tags: dict, k: int = 3) -> MemoryBundle:
        """Top-k L2 records by weighted tag match, newest first among equal scores, plus all L3 principles."""
        if k < 0:
            raise ValueError("k must be >= 0")
        ranked = sorted(self.L2, key=lambda r: (-r.score(tags), -r.episode_index))
        return MemoryBundle(ranked[:k], list(self.L3))

    def to_dict(self) -> dict:
        return {"L1": self.L1, "L2": [asdict(r) for r in self.L2], "L3": self.L3,
                "distillations": self.distillations, "distill_every": self.distill_every}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryStore":
        return cls(dict(d.get("L1", {})), [L2Record(**r) for r in d.get("L2", [])], list(d.get("L3", [])),
                   list(d.get("distillations", [])), int(d.get("distill_every", DISTILL_EVERY)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MemoryStore":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
