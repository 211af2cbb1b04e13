"""Generation requests: archetype, per-category counts, layout hints, edit bounds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .scene import CATEGORIES

ARCHETYPES = (
    "downtown_intersection",
    "residential",
    "industrial",
    "commercial_avenue",
    "mixed_use",
)


class SpecError(ValueError):
    """A generation spec failed validation. ``where`` names the offending field or line."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass(frozen=True)
class RoadAxis:
    axis: str  # "x" (road runs along X) or "y"
    offset: float = 0.0  # perpendicular offset of the centre line, cm
    width: float = 800.0


@dataclass(frozen=True)
class Zone:
    kind: str  # park | yard | plaza | construction
    rect: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


@dataclass(frozen=True)
class LayoutHints:
    roads: tuple[RoadAxis, ...] = ()
    zones: tuple[Zone, ...] = ()


@dataclass(frozen=True)
class EditSpec:
    targets: tuple[str, ...] = ()
    count_bounds: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class GenerationSpec:
    archetype: str
    counts: Mapping[str, int] = field(default_factory=dict)
    hints: LayoutHints | None = None
    difficulty: Mapping[str, float] = field(default_factory=dict)
    seed: int = 0
    request_text: str = ""
    edit: EditSpec | None = None
    time_of_day: str = "noon"

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise SpecError(f"unknown archetype {self.archetype!r}; expected one of {ARCHETYPES}",
                            "archetype")
        for cat, n in self.counts.items():
            if cat not in CATEGORIES:
                raise SpecError(f"unknown category {cat!r}", f"counts.{cat}")
            if not isinstance(n, int) or n < 0:
                raise SpecError(f"count must be a non-negative integer, got {n!r}", f"counts.{cat}")

    def describe(self) -> str:
        if self.request_text:
            return self.request_text
        parts = ", ".join(f"{n} {c}" for c, n in sorted(self.counts.items()) if n)
        return f"{self.archetype.replace('_', ' ')} scene with {parts or 'roads only'}"

    def to_dict(self) -> dict:
        d = {
            "archetype": self.archetype,
            "counts": dict(sorted(self.counts.items())),
            "difficulty": dict(sorted(self.difficulty.items())),
            "seed": self.seed,
            "request_text": self.request_text,
            "time_of_day": self.time_of_day,
        }
        if self.hints is not None:
            d["hints"] = {
                "roads": [{"axis": r.axis, "offset": r.offset, "width": r.width} for r in self.hints.roads],
                "zones": [{"kind": z.kind, "rect": list(z.rect)} for z in self.hints.zones],
            }
        if self.edit is not None:
            d["edit"] = {"targets": list(self.edit.targets), "count_bounds": list(self.edit.count_bounds)}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GenerationSpec":
        if not isinstance(d, Mapping):
            raise SpecError("top-level value must be an object")
        known = {"archetype", "counts", "difficulty", "seed", "request_text", "time_of_day", "hints", "edit"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown fields {sorted(extra)}")
        if "archetype" not in d:
            raise SpecError("missing required field", "archetype")
        hints = None
        if d.get("hints") is not None:
            h = d["hints"]
            try:
                roads = tuple(RoadAxis(r["axis"], float(r.get("offset", 0.0)), float(r.get("width", 800.0)))
                              for r in h.get("roads", []))
                zones = tuple(Zone(z["kind"], tuple(float(v) for v in z["rect"])) for z in h.get("zones", []))
            except (KeyError, TypeError, ValueError) as exc:
                raise SpecError(f"malformed layout hints ({exc})", "hints") from None
            for r in roads:
                if r.axis not in ("x", "y") or r.width <= 0:
                    raise SpecError(f"bad road axis {r}", "hints.roads")
            for z in zones:
                if len(z.rect) != 4 or z.rect[0] >= z.rect[2] or z.rect[1] >= z.rect[3]:
                    raise SpecError(f"bad zone rectangle {z.rect}", "hints.zones")
            hints = LayoutHints(roads, zones)
        edit = None
        if d.get("edit") is not None:
            e = d["edit"]
            lo, hi = e.get("count_bounds", [0, 0])
            edit = EditSpec(tuple(e.get("targets", [])), (int(lo), int(hi)))
        seed = d.get("seed", 0)
        if not isinstance(seed, int):
            raise SpecError(f"seed must be an integer, got {seed!r}", "seed")
        return cls(
            archetype=d["archetype"],
            counts=dict(d.get("counts", {})),
            hints=hints,
            difficulty=dict(d.get("difficulty", {})),
            seed=seed,
            request_text=d.get("request_text", ""),
            edit=edit,
            time_of_day=d.get("time_of_day", "noon"),
        )

    @classmethod
    def from_json(cls, text: str) -> "GenerationSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
        return cls.from_dict(d)
