"""Scene generation pipeline: context, layout plan, construction, semantic checks, skill authoring.

The default planner is procedural. Roads go down first, then flush rows of
buildings facing them, then street dressing (trees, furniture, parked
vehicles) on the sidewalk bands, then containers and props in zones.
Construction runs the rule checks after every batch and revises offenders in
place; the semantic loop asks a judge for at most three rounds.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .genspec import GenerationSpec, LayoutHints, RoadAxis, Zone
from .scene import (ENVIRONMENT_CATEGORIES, ActorRecord, Catalog, Rotation, Transform, Vec3, default_catalog,
                    world_aabb)
from .skills import FailureSignature, SkillDoc, SkillIndex, author_skill
from .tool_server import Session, ToolError, execute
from .verifiers import PASS, Verdict, issue_tag

log = logging.getLogger(__name__)

GROUND_SIZE = 19000.0
SIDEWALK_WIDTH = 300.0
DEFAULT_LAYOUT_HALF = 6000.0
BATCH_SIZE = 20
REVISION_BUDGET = 5
REVISION_MARGIN = 20.0
MAX_VERIFY_ROUNDS = 3
PLACEMENT_TRIES = 400

DEFAULT_SPACING = {  # category -> (clearance_cm, setback_cm)
    "building": (20.0, 150.0),
    "tree": (150.0, 60.0),
    "vehicle": (120.0, 40.0),
    "street_furniture": (80.0, 30.0),
    "prop": (60.0, 0.0),
    "container": (60.0, 0.0),
}

NAME_PREFIX = {
    "road": "Road", "building": "Bldg", "tree": "Tree", "street_furniture": "SF",
    "vehicle": "Veh", "container": "Cont", "prop": "Prop",
}
PLACEMENT_ORDER = ("building", "tree", "street_furniture", "vehicle", "container", "prop")

BUILDING_POOLS = {
    "downtown_intersection": ("building_office_tower_01", "building_office_tower_02", "building_office_mid_01",
                              "building_mixed_01", "building_shop_01"),
    "residential": ("building_house_01", "building_house_02", "building_house_03", "building_apartment_01",
                    "building_apartment_02"),
    "industrial": ("building_warehouse_01", "building_warehouse_02", "building_factory_01"),
    "commercial_avenue": ("building_shop_01", "building_shop_02", "building_mixed_01", "building_mixed_02",
                          "building_office_mid_01"),
    "mixed_use": ("building_mixed_01", "building_mixed_02", "building_apartment_01", "building_shop_02",
                  "building_house_02"),
}

ARCHETYPE_TAGS = {
    "downtown_intersection": ("layout", "grid", "placement", "furniture"),
    "residential": ("layout", "placement", "trees", "furniture"),
    "industrial": ("layout", "zones", "placement"),
    "commercial_avenue": ("layout", "placement", "sidewalk", "furniture"),
    "mixed_use": ("layout", "zones", "placement", "furniture"),
}


class BuildError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class InfeasibleError(BuildError):
    def __init__(self, constraint: str, message: str):
        super().__init__("plan", f"infeasible ({constraint}): {message}")
        self.constraint = constraint


@dataclass(frozen=True)
class Placement:
    name: str
    asset_id: str
    location: tuple[float, float, float]
    yaw: float = 0.0

    def command(self) -> dict:
        return {"tool": "spawn_actor", "args": {"name": self.name, "static_mesh": self.asset_id,
                                                "location": list(self.location), "rotation": [self.yaw, 0.0, 0.0]}}


@dataclass
class BuildPlan:
    batches: list[tuple[str, list[Placement]]]
    zones: dict[str, list[tuple[float, float, float, float]]] = field(default_factory=dict)

    @property
    def placements(self) -> list[Placement]:
        return [p for _, batch in self.batches for p in batch]

    def to_dict(self) -> dict:
        return {"batches": [{"label": lab, "placements": [p.__dict__ for p in b]} for lab, b in self.batches],
                "zones": self.zones}


@dataclass
class BuildTrace:
    calls: list[dict] = field(default_factory=list)  # mutating tool calls, replayable as one batch
    revisions: list[dict] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)  # judge verdicts per semantic round
    promoted: list[str] = field(default_factory=list)

    def to_jsonl_rows(self) -> list[dict]:
        rows = [{"kind": "call", **c} for c in self.calls]
        rows += [{"kind": "revision", **r} for r in self.revisions]
        rows += [{"kind": "verdict", "round": i + 1, **v} for i, v in enumerate(self.rounds)]
        rows += [{"kind": "promoted", "skill": s} for s in self.promoted]
        return rows


@dataclass
class Context:
    assets: list[dict]
    skills: list[SkillDoc]
    env_settings: dict


# -- stage 1 ----------------------------------------------------------------


def acquire_context(session: Session, index: SkillIndex, spec: GenerationSpec | None = None) -> Context:
    assets = execute(session, "list_assets", {})["assets"]
    archetype = spec.archetype if spec is not None else "mixed_use"
    skills = index.retrieve(ARCHETYPE_TAGS[archetype], k=5)
    if "city-layout" in index and all(s.name != "city-layout" for s in skills):
        skills.append(index.get("city-layout"))
    env = execute(session, "setup_environment",
                  {"ground_size": GROUND_SIZE, "time_of_day": spec.time_of_day if spec else "noon"})
    return Context(assets, skills, env["env_settings"])


# -- stage 2 ----------------------------------------------------------------


def spacing_table(skills: Sequence[SkillDoc] = ()) -> dict[str, tuple[float, float]]:
    """Per-category (clearance, setback) from the building-placement skill, else defaults."""
    table = dict(DEFAULT_SPACING)
    for doc in skills:
        if doc.name != "building-placement":
            continue
        for line in doc.section("Spacing").splitlines():
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            if len(cells) == 3 and cells[0] in table:
                try:
                    table[cells[0]] = (float(cells[1]), float(cells[2]))
                except ValueError:
                    continue
    return table


def default_hints(archetype: str, half: float) -> LayoutHints:
    q = half / 2
    if archetype == "downtown_intersection":
        return LayoutHints((RoadAxis("x", 0.0, 800.0), RoadAxis("y", 0.0, 800.0)),
                           (Zone("plaza", (-q - 600, -q - 600, -q + 600, -q + 600)),))
    if archetype == "residential":
        return LayoutHints((RoadAxis("x", 0.0, 800.0),), (Zone("park", (-half, q, -q, half)),))
    if archetype == "industrial":
        return LayoutHints((RoadAxis("x", 0.0, 1200.0),), (Zone("yard", (-q, -half, half, -q)),
                                                             Zone("construction", (-half, q, -q, half))))
    if archetype == "commercial_avenue":
        return LayoutHints((RoadAxis("x", 0.0, 1200.0),), ())
    return LayoutHints((RoadAxis("x", 0.0, 800.0), RoadAxis("y", q, 800.0)),
                       (Zone("plaza", (-q - 600, q - 600, -q + 600, q + 600)),))


Box = tuple[float, float, float, float]


def _overlaps(a: Box, b: Box) -> bool:
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def _grow(b: Box, m: float) -> Box:
    return (b[0] - m, b[1] - m, b[2] + m, b[3] + m)


class _Planner:
    def __init__(self, spec: GenerationSpec, catalog: Catalog, skills: Sequence[SkillDoc]):
        self.spec = spec
        self.catalog = catalog
        self.rng = np.random.default_rng(spec.seed)
        self.spacing = spacing_table(skills)
        self.half = float(spec.difficulty.get("extent", DEFAULT_LAYOUT_HALF))
        if not 1000 <= self.half <= GROUND_SIZE / 2:
            raise InfeasibleError("extent", f"layout half-extent {self.half} outside [1000, {GROUND_SIZE / 2}]")
        self.hints = spec.hints if spec.hints is not None and spec.hints.roads else default_hints(spec.archetype,
                                                                                                  self.half)
        if spec.hints is not None and spec.hints.zones:
            self.hints = LayoutHints(self.hints.roads, spec.hints.zones)
        self.carriage: list[Box] = []
        self.sidewalks: list[Box] = []
        self.solid: list[tuple[Box, str]] = []  # placed non-road footprints and their categories
        self.batches: list[tuple[str, list[Placement]]] = []
        self.counter: dict[str, int] = {}

    def _name(self, cat: str) -> str:
        i = self.counter.get(cat, 0)
        self.counter[cat] = i + 1
        return f"{NAME_PREFIX[cat]}_{i:03d}"

    def _footprint(self, asset_id: str, x: float, y: float, yaw: float) -> tuple[Box, float]:
        rec = ActorRecord("_", asset_id, self.catalog.get(asset_id).category,
                          Transform(Vec3(x, y, 0.0), Rotation(yaw)), True)
        b = world_aabb(rec, self.catalog)
        return (b.min.x, b.min.y, b.max.x, b.max.y), self.catalog.get(asset_id).base_extent.z

    def _fits(self, box: Box, cat: str, allow_sidewalk: bool, allow_road: bool) -> bool:
        lim = GROUND_SIZE / 2
        if box[0] < -lim or box[1] < -lim or box[2] > lim or box[3] > lim:
            return False
        if not allow_road and any(_overlaps(box, r) for r in self.carriage):
            return False
        if not allow_sidewalk and any(_overlaps(box, r) for r in self.sidewalks):
            return False
        gap = self.spacing.get(cat, (0.0, 0.0))[0]
        grown = _grow(box, gap)
        return not any(_overlaps(grown, b) for b, _ in self.solid)

    # roads ----------------------------------------------------------------

    def lay_roads(self) -> None:
        out = []
        h = self.half
        for road in self.hints.roads:
            wide = road.width > 800.0
            asset = "road_straight_wide_01" if wide else "road_straight_01"
            seg = self.catalog.get(asset).base_extent
            n = max(1, math.ceil(2 * h / (2 * seg.x)))
            start = -n * seg.x
            for i in range(n):
                u = start + seg.x * (2 * i + 1)
                x, y, yaw = (u, road.offset, 0.0) if road.axis == "x" else (road.offset, u, 90.0)
                out.append(Placement(self._name("road"), asset, (x, y, seg.z), yaw))
                self.carriage.append(self._footprint(asset, x, y, yaw)[0])
                side = self.catalog.get("road_sidewalk_01").base_extent
                for sgn in (-1.0, 1.0):
                    off = road.offset + sgn * (road.width / 2 + side.y)
                    sx, sy = (u, off) if road.axis == "x" else (off, u)
                    out.append(Placement(self._name("road"), "road_sidewalk_01", (sx, sy, side.z), yaw))
                    self.sidewalks.append(self._footprint("road_sidewalk_01", sx, sy, yaw)[0])
        roads = self.hints.roads
        for i, a in enumerate(roads):
            for b in roads[i + 1:]:
                if a.axis != b.axis:
                    x, y = (b.offset, a.offset) if a.axis == "x" else (a.offset, b.offset)
                    ext = self.catalog.get("road_intersection_01").base_extent
                    out.append(Placement(self._name("road"), "road_intersection_01", (x, y, ext.z + 1.0), 0.0))
        for z in self.hints.zones:
            if z.kind == "plaza":
                cx, cy = (z.rect[0] + z.rect[2]) / 2, (z.rect[1] + z.rect[3]) / 2
                ext = self.catalog.get("road_plaza_tile_01").base_extent
                out.append(Placement(self._name("road"), "road_plaza_tile_01", (cx, cy, ext.z), 0.0))
        if out:
            self.batches.append(("roads", out))

    # buildings --------------------------------------------------------------

    def _rows(self, tier_offset: float) -> list[dict]:
        rows = []
        setback = self.spacing["building"][1]
        for road in self.hints.roads:
            edge = road.width / 2 + SIDEWALK_WIDTH + setback + tier_offset
            for sgn in (1.0, -1.0):
                rows.append({"axis": road.axis, "line": road.offset + sgn * edge, "side": sgn,
                             "cursor": -self.half, "open": True})
        return rows

    def place_buildings(self, n: int) -> None:
        if n == 0:
            return
        pool = BUILDING_POOLS[self.spec.archetype]
        placed: list[Placement] = []
        depth = max(self.catalog.get(a).base_extent.y for a in pool)
        gap = self.spacing["building"][0]
        for tier in range(3):
            rows = self._rows(tier * (2 * depth + 400.0))
            while len(placed) < n and any(r["open"] for r in rows):
                for row in rows:
                    if len(placed) >= n or not row["open"]:
                        continue
                    asset = pool[int(self.rng.integers(len(pool)))]
                    p = self._pack(row, asset, gap)
                    if p is not None:
                        placed.append(p)
            if len(placed) >= n:
                break
        if len(placed) < n:
            raise InfeasibleError("building", f"row capacity: fitted {len(placed)} of {n} buildings within "
                                  f"half-extent {self.half:.0f} cm")
        self._emit("building", placed)

    def _pack(self, row: dict, asset: str, gap: float) -> Placement | None:
        ext = self.catalog.get(asset).base_extent
        yaw = 0.0 if row["axis"] == "x" else 90.0
        along, depth = ext.x, ext.y
        while row["cursor"] + 2 * along <= self.half:
            u = row["cursor"] + along
            v = row["line"] + row["side"] * depth
            x, y = (u, v) if row["axis"] == "x" else (v, u)
            box, hz = self._footprint(asset, x, y, yaw)
            if self._fits(box, "building", False, False):
                row["cursor"] = u + along + gap
                p = Placement(self._name("building"), asset, (x, y, hz), yaw)
                self.solid.append((box, "building"))
                return p
            # jump past whatever blocks this slot
            blockers = [b for b in self.carriage + self.sidewalks + [s for s, _ in self.solid]
                        if _overlaps(_grow(box, gap), b)]
            if blockers:
                hi = max(b[2] if row["axis"] == "x" else b[3] for b in blockers)
                row["cursor"] = max(row["cursor"] + 50.0, hi + gap + 1.0)
            else:  # outside the ground
                row["cursor"] += 50.0
        row["open"] = False
        return None

    # dressing -----------------------------------------------------------------

    def _band_point(self, inset: float) -> tuple[float, float, float]:
        """Random point on a sidewalk band, plus the yaw of the road it runs along."""
        road = self.hints.roads[int(self.rng.integers(len(self.hints.roads)))]
        sgn = 1.0 if self.rng.random() < 0.5 else -1.0
        v = road.offset + sgn * (road.width / 2 + inset)
        u = float(self.rng.uniform(-self.half, self.half))
        return ((u, v, 0.0) if road.axis == "x" else (v, u, 90.0))

    def _zone_point(self, kinds: Sequence[str]) -> tuple[float, float] | None:
        zones = [z for z in self.hints.zones if z.kind in kinds]
        if not zones:
            return None
        z = zones[int(self.rng.integers(len(zones)))]
        return float(self.rng.uniform(z.rect[0], z.rect[2])), float(self.rng.uniform(z.rect[1], z.rect[3]))

    def _any_point(self) -> tuple[float, float]:
        return float(self.rng.uniform(-self.half, self.half)), float(self.rng.uniform(-self.half, self.half))

    def _candidate(self, cat: str) -> tuple[float, float, float, bool, bool]:
        """(x, y, yaw, allow_sidewalk, allow_road) for one placement attempt."""
        r = self.rng.random()
        if cat == "tree":
            zp = self._zone_point(("park", "plaza"))
            if zp is not None and r < 0.4:
                return (*zp, 0.0, False, False)
            x, y, yaw = self._band_point(SIDEWALK_WIDTH * 0.5)
            return x, y, yaw, True, False
        if cat == "street_furniture":
            zp = self._zone_point(("plaza", "park"))
            if zp is not None and r < 0.25:
                return (*zp, float(self.rng.choice([0.0, 90.0])), True, False)
            x, y, yaw = self._band_point(SIDEWALK_WIDTH * float(self.rng.choice([0.2, 0.8])))
            return x, y, yaw, True, False
        if cat == "vehicle":
            road = self.hints.roads[int(self.rng.integers(len(self.hints.roads)))]
            sgn = 1.0 if self.rng.random() < 0.5 else -1.0
            v = road.offset + sgn * (road.width / 2 - 150.0)
            u = float(self.rng.uniform(-self.half, self.half))
            yaw = (0.0 if sgn > 0 else 180.0) + (0.0 if road.axis == "x" else 90.0)
            x, y = (u, v) if road.axis == "x" else (v, u)
            return x, y, yaw, False, True
        if cat == "container":
            zp = self._zone_point(("yard",)) or self._any_point()
            return (*zp, float(self.rng.choice([0.0, 90.0])), False, False)
        zp = self._zone_point(("construction", "yard")) if r < 0.5 else None
        if zp is None:
            x, y, yaw = self._band_point(SIDEWALK_WIDTH * 0.5) if r < 0.8 else (*self._any_point(), 0.0)
            return x, y, yaw, True, False
        return (*zp, 0.0, True, False)

    def place_scattered(self, cat: str, n: int) -> None:
        if n == 0:
            return
        assets = [a.asset_id for a in self.catalog.list_assets(cat)]
        placed = []
        for _ in range(n):
            for _ in range(PLACEMENT_TRIES):
                asset = assets[int(self.rng.integers(len(assets)))]
                x, y, yaw, side_ok, road_ok = self._candidate(cat)
                x, y = round(x, 1), round(y, 1)
                box, hz = self._footprint(asset, x, y, yaw)
                if self._fits(box, cat, side_ok, road_ok):
                    self.solid.append((box, cat))
                    placed.append(Placement(self._name(cat), asset, (x, y, hz), yaw))
                    break
            else:
                raise InfeasibleError(cat, f"no free spot for {cat} #{len(placed) + 1} of {n} after "
                                      f"{PLACEMENT_TRIES} tries at clearance {self.spacing[cat][0]:.0f} cm")
        self._emit(cat, placed)

    def _emit(self, cat: str, placed: list[Placement]) -> None:
        for i in range(0, len(placed), BATCH_SIZE):
            self.batches.append((f"{cat}_{i // BATCH_SIZE}", placed[i:i + BATCH_SIZE]))


def plan_layout(spec: GenerationSpec, catalog: Catalog | None = None,
                skills: Sequence[SkillDoc] = ()) -> BuildPlan:
    """Deterministic procedural plan for (spec, seed)."""
    p = _Planner(spec, catalog or default_catalog(), skills)
    p.lay_roads()
    p.place_buildings(spec.counts.get("building", 0))
    for cat in PLACEMENT_ORDER[1:]:
        p.place_scattered(cat, spec.counts.get(cat, 0))
    zones: dict[str, list] = {}
    for z in p.hints.zones:
        zones.setdefault(z.kind, []).append(list(z.rect))
    return BuildPlan(p.batches, zones)


# -- stage 3 ----------------------------------------------------------------


def _log_since(session: Session, start: int) -> list[dict]:
    return list(session.event_log[start:])


def _nudge(session: Session, name: str, other: str) -> dict | None:
    """Translate ``name`` away from ``other`` along the axis of least overlap; None if it would leave bounds."""
    scene, cat = session.scene, session.catalog
    a, b = world_aabb(scene.get(name), cat), world_aabb(scene.get(other), cat)
    ox = min(a.max.x, b.max.x) - max(a.min.x, b.min.x)
    oy = min(a.max.y, b.max.y) - max(a.min.y, b.min.y)
    loc = scene.get(name).transform.location
    if ox <= oy:
        d = ox + REVISION_MARGIN
        sgn = 1.0 if a.center.x >= b.center.x else -1.0
        new = Vec3(loc.x + sgn * d, loc.y, loc.z)
    else:
        d = oy + REVISION_MARGIN
        sgn = 1.0 if a.center.y >= b.center.y else -1.0
        new = Vec3(loc.x, loc.y + sgn * d, loc.z)
    h = scene.ground_half_extent
    if abs(new.x) > h or abs(new.y) > h:
        return None
    execute(session, "set_actor_transform", {"name": name, "location": new.as_list()})
    return {"action": "nudge", "actor": name, "away_from": other, "axis": "x" if ox <= oy else "y",
            "distance": round(d, 6)}


def resolve_violations(session: Session, names: Sequence[str] | None, budget: dict[str, int],
                       protected: frozenset[str] = frozenset()) -> list[dict]:
    """Nudge or delete actors until no collision/floating violation touches ``names``."""
    revisions = []
    for _ in range(10_000):
        args = {} if names is None else {"names": [n for n in names if n in session.scene.actors]}
        if names is not None and not args["names"]:
            break
        sup = execute(session, "check_vertical_support", args)["floating"]
        for n, gap in sup:
            loc = session.scene.get(n).transform.location
            execute(session, "set_actor_transform", {"name": n, "location": [loc.x, loc.y, loc.z - gap]})
            revisions.append({"action": "ground", "actor": n, "dz": -gap})
        pairs = execute(session, "check_collisions", args)["pairs"]
        if not pairs:
            break
        a, b, _ = pairs[0]
        movable = [n for n in (b, a) if n not in protected and (names is None or n in names)] or [b, a]
        mover = movable[0]
        other = a if mover == b else b
        if budget.get(mover, 0) < REVISION_BUDGET:
            budget[mover] = budget.get(mover, 0) + 1
            rev = _nudge(session, mover, other)
            if rev is not None:
                revisions.append(rev)
                continue
        execute(session, "delete_actor", {"name": mover})
        revisions.append({"action": "delete", "actor": mover, "collided_with": other})
    else:
        raise BuildError("construct", "revision loop did not converge")
    return revisions


def construct(session: Session, plan: BuildPlan, trace: BuildTrace | None = None) -> BuildTrace:
    trace = trace if trace is not None else BuildTrace()
    budget: dict[str, int] = {}
    for label, batch in plan.batches:
        if not batch:
            continue
        try:
            execute(session, "execute_python_script", {"script": [p.command() for p in batch]})
        except ToolError as exc:
            raise BuildError("construct", f"batch {label!r} rejected: {exc.message}") from None
        names = [p.name for p in batch]
        if label == "roads":
            continue
        revs = resolve_violations(session, names, budget)
        for r in revs:
            r["batch"] = label
        trace.revisions.extend(revs)
    return trace


# -- stage 4 ----------------------------------------------------------------


def _correct(session: Session, verdict: Verdict, budget: dict[str, int]) -> list[dict]:
    """Targeted corrections for the metrics named in the verdict's issues."""
    tags = {issue_tag(i).split("[", 1)[0] for i in verdict.issues}
    revs = []
    if tags & {"COL", "GRAV"}:
        revs += resolve_violations(session, None, budget)
    if "GRAV" in tags:
        for a in session.scene.get_actors():
            if a.category in ENVIRONMENT_CATEGORIES:
                continue
            bottom = world_aabb(a, session.catalog).min.z
            if abs(bottom - session.scene.ground_z) > 0:
                loc = a.transform.location
                execute(session, "set_actor_transform",
                        {"name": a.name, "location": [loc.x, loc.y, loc.z - (bottom - session.scene.ground_z)]})
                revs.append({"action": "ground", "actor": a.name, "dz": session.scene.ground_z - bottom})
    if "OOB" in tags:
        h = session.scene.ground_half_extent
        for a in session.scene.get_actors():
            c = world_aabb(a, session.catalog).center
            if abs(c.x) > h or abs(c.y) > h:
                loc = a.transform.location
                nx = loc.x - (c.x - max(-h, min(h, c.x)))
                ny = loc.y - (c.y - max(-h, min(h, c.y)))
                execute(session, "set_actor_transform", {"name": a.name, "location": [nx, ny, loc.z]})
                revs.append({"action": "clamp", "actor": a.name})
    return revs


def verify_semantic(session: Session, judge, request_text: str, trace: BuildTrace | None = None,
                    max_rounds: int = MAX_VERIFY_ROUNDS) -> tuple[Verdict, int]:
    """Judge, correct the named issues, re-judge; stops on PASS or after ``max_rounds``."""
    session.judge = judge
    budget: dict[str, int] = {}
    verdict = None
    rounds = 0
    for rounds in range(1, max(1, min(max_rounds, MAX_VERIFY_ROUNDS)) + 1):
        try:
            payload = execute(session, "verify_scene", {"original_request": request_text})
        except ToolError as exc:
            raise BuildError("verify", exc.message) from None
        verdict = Verdict.from_dict(payload)
        if trace is not None:
            trace.rounds.append(verdict.to_dict())
        if verdict.status == PASS or rounds == max_rounds:
            break
        revs = _correct(session, verdict, budget)
        if trace is not None:
            for r in revs:
                r["round"] = rounds
            trace.revisions.extend(revs)
    return verdict, rounds


# -- stage 5 + composition ------------------------------------------------


def failure_signatures(verdicts: Sequence[dict]) -> list[FailureSignature]:
    """One signature per distinct ``METRIC[category]`` tag seen in non-passing verdicts."""
    seen = []
    for v in verdicts:
        if v["status"] == PASS:
            continue
        for issue in v["issues"]:
            m = re.match(r"([A-Z]+)\[([^\]]*)\]", issue_tag(issue))
            sig = FailureSignature.of(m.group(1), m.group(2)) if m else FailureSignature.of("judge", issue_tag(issue))
            if sig not in seen:
                seen.append(sig)
    return seen


def generate_scene(spec: GenerationSpec, judge="rule", index: SkillIndex | None = None,
                   catalog: Catalog | None = None,
                   author: Callable[[FailureSignature, list, int], SkillDoc] = author_skill,
                   out_dir=None) -> tuple:
    """Run all five stages; returns (scene, trace, verdict)."""
    if index is None:
        raise BuildError("context", "a skill index is required")
    session = Session(catalog=catalog or default_catalog(), judge=judge, spec=spec, out_dir=out_dir)
    episode = index.next_episode()
    trace = BuildTrace()
    try:
        ctx = acquire_context(session, index, spec)
    except ToolError as exc:
        raise BuildError("context", exc.message) from None
    plan = plan_layout(spec, session.catalog, ctx.skills)
    construct(session, plan, trace)
    mark = len(session.event_log)
    verdict, _ = verify_semantic(session, judge, spec.describe(), trace)
    corrections = _log_since(session, mark)
    for sig in failure_signatures(trace.rounds):
        index.record_failure(sig, episode)
        if index.should_promote(sig, episode):
            doc = author(sig, corrections, episode)
            if doc.name in index:
                continue
            index.register(doc, (sig, episode))
            trace.promoted.append(doc.name)
    trace.calls = list(session.event_log)
    return session.scene, trace, verdict
