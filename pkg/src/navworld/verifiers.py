"""Rule-based scene checks, scene metrics and pluggable semantic judges."""

from __future__ import annotations

import json
import socket
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .genspec import GenerationSpec
from .scene import ENVIRONMENT_CATEGORIES, Aabb, Catalog, SceneGraph, match_names, world_aabb

# actors whose largest world half-extent is at or below this are ignored by collision checks
COLLISION_MIN_EXTENT = 100.0
GRAVITY_TOLERANCE = 200.0
SUPPORT_TOLERANCE = 10.0

PASS, NEEDS_IMPROVEMENT, FAIL = "PASS", "NEEDS_IMPROVEMENT", "FAIL"
VLM_METRICS = ("PF", "SRF", "LAES", "ILC", "STY", "EC", "SC", "LQ")


@dataclass(frozen=True)
class CollisionPair:
    actor_a: str
    actor_b: str
    overlap_area: float


@dataclass
class CollisionReport:
    pairs: list[CollisionPair]
    collision_free_rate: float

    def to_dict(self) -> dict:
        return {"pairs": [[p.actor_a, p.actor_b, p.overlap_area] for p in self.pairs],
                "collision_free_rate": self.collision_free_rate}


@dataclass
class SupportReport:
    floating: list[tuple[str, float]]
    supported_rate: float

    def to_dict(self) -> dict:
        return {"floating": [[n, g] for n, g in self.floating], "supported_rate": self.supported_rate}


@dataclass
class BoundsReport:
    out_of_bounds: list[str]
    in_bounds_rate: float

    def to_dict(self) -> dict:
        return {"out_of_bounds": list(self.out_of_bounds), "in_bounds_rate": self.in_bounds_rate}


@dataclass(frozen=True)
class RubricScore:
    raw: int

    def __post_init__(self):
        if not isinstance(self.raw, int) or not 0 <= self.raw <= 10:
            raise ValueError(f"rubric score must be an integer in 0..10, got {self.raw!r}")

    @property
    def normalized(self) -> float:
        return self.raw / 10


@dataclass
class Verdict:
    status: str
    issues: list[str] = field(default_factory=list)
    scores: dict[str, RubricScore] = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in (PASS, NEEDS_IMPROVEMENT, FAIL):
            raise ValueError(f"bad verdict status {self.status!r}")
        if self.status == FAIL and not self.issues:
            raise ValueError("a FAIL verdict must carry at least one issue")

    def to_dict(self) -> dict:
        return {"status": self.status, "issues": list(self.issues),
                "scores": {k: {"raw": v.raw, "normalized": v.normalized}
                           for k, v in sorted(self.scores.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Verdict":
        scores = {}
        for k, v in (d.get("scores") or {}).items():
            scores[k] = RubricScore(int(v["raw"] if isinstance(v, Mapping) else v))
        return cls(d["status"], list(d.get("issues", [])), scores)


@dataclass
class SceneMetricSet:
    CNT: float | None = None
    DIV: float | None = None
    COL: float | None = None
    GRAV: float | None = None
    OOB: float | None = None
    PRES: float | None = None
    ECNT: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _universe(scene: SceneGraph, scope: str | None) -> list[str]:
    if scope in (None, "", "all"):
        return sorted(scene.actors)
    if scope == "spawned":
        return sorted(n for n, a in scene.actors.items() if a.spawned_in_session)
    return match_names(scene.actors, scope)


def _boxes(scene: SceneGraph, catalog: Catalog, names: Iterable[str]) -> dict[str, Aabb]:
    return {n: world_aabb(scene.actors[n], catalog) for n in names}


def _max_half_extent(box: Aabb) -> float:
    h = box.half_extent
    return max(h.x, h.y, h.z)


def check_collisions(scene: SceneGraph, catalog: Catalog, names: Sequence[str] | None = None,
                     scope: str | None = None, min_area: float = 0.0) -> CollisionReport:
    """AABB overlap pairs among non-environment actors larger than 100 units.

    ``scope`` restricts the actor universe (glob, ``"spawned"`` or ``"all"``);
    ``names`` keeps only pairs involving at least one of the named actors.
    A pair counts when the boxes overlap with positive volume and the XY
    intersection area is at least ``min_area``.
    """
    universe = [n for n in _universe(scene, scope)
                if scene.actors[n].category not in ENVIRONMENT_CATEGORIES]
    boxes = _boxes(scene, catalog, universe)
    eligible = sorted((n for n in universe if _max_half_extent(boxes[n]) > COLLISION_MIN_EXTENT),
                      key=lambda n: (boxes[n].min.x, n))
    focus = set(names) if names is not None else None

    pairs = []
    # sweep along x: boxes sorted by min.x, stop scanning once the next min.x passes max.x
    for i, a in enumerate(eligible):
        ba = boxes[a]
        for b in eligible[i + 1:]:
            bb = boxes[b]
            if bb.min.x >= ba.max.x:
                break
            if focus is not None and a not in focus and b not in focus:
                continue
            ox = min(ba.max.x, bb.max.x) - max(ba.min.x, bb.min.x)
            oy = min(ba.max.y, bb.max.y) - max(ba.min.y, bb.min.y)
            oz = min(ba.max.z, bb.max.z) - max(ba.min.z, bb.min.z)
            if ox > 0 and oy > 0 and oz > 0:
                area = ox * oy
                if area >= min_area:
                    pairs.append(CollisionPair(*sorted((a, b)), area))
    pairs.sort(key=lambda p: (p.actor_a, p.actor_b))
    involved = {p.actor_a for p in pairs} | {p.actor_b for p in pairs}
    rate = 1.0 if not universe else 1.0 - len(involved) / len(universe)
    return CollisionReport(pairs, rate)


def check_vertical_support(scene: SceneGraph, catalog: Catalog, names: Sequence[str] | None = None,
                           scope: str | None = None, ground_z: float | None = None,
                           tolerance: float = SUPPORT_TOLERANCE) -> SupportReport:
    """Report actors whose box bottom hovers above the ground with nothing under it.

    An actor is supported when another actor's box top lies within
    ``tolerance`` of its bottom while the two footprints overlap in XY.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    gz = scene.ground_z if ground_z is None else ground_z
    universe = _universe(scene, scope)
    checked = universe if names is None else [n for n in universe if n in set(names)]
    boxes = _boxes(scene, catalog, scene.actors)
    floating = []
    for n in checked:
        b = boxes[n]
        bottom = b.min.z
        if bottom <= gz + tolerance:
            continue
        supported = False
        for m, o in boxes.items():
            if m == n or abs(bottom - o.max.z) > tolerance:
                continue
            if min(b.max.x, o.max.x) > max(b.min.x, o.min.x) and min(b.max.y, o.max.y) > max(b.min.y, o.min.y):
                supported = True
                break
        if not supported:
            floating.append((n, bottom - gz))
    rate = 1.0 if not checked else 1.0 - len(floating) / len(checked)
    return SupportReport(floating, rate)


def score_gravity(scene: SceneGraph, catalog: Catalog, tolerance: float = GRAVITY_TOLERANCE) -> float:
    """Fraction of non-environment actors whose box bottom is within ``tolerance`` of the ground."""
    names = [n for n, a in scene.actors.items() if a.category not in ENVIRONMENT_CATEGORIES]
    if not names:
        return 1.0
    ok = sum(abs(world_aabb(scene.actors[n], catalog).min.z - scene.ground_z) <= tolerance for n in names)
    return ok / len(names)


def check_bounds(scene: SceneGraph, catalog: Catalog, half_extent: float | None = None) -> BoundsReport:
    h = scene.ground_half_extent if half_extent is None else float(half_extent)
    if h <= 0:
        raise ValueError("half_extent must be > 0")
    out = []
    for a in scene.get_actors():
        c = world_aabb(a, catalog).center
        if abs(c.x) > h or abs(c.y) > h:
            out.append(a.name)
    rate = 1.0 if not scene.actors else 1.0 - len(out) / len(scene.actors)
    return BoundsReport(out, rate)


def category_counts(scene: SceneGraph) -> Counter:
    return Counter(a.category for a in scene.actors.values())


def compute_rule_metrics(scene: SceneGraph, catalog: Catalog, spec: GenerationSpec | None = None,
                         baseline: SceneGraph | None = None) -> SceneMetricSet:
    m = SceneMetricSet(
        COL=check_collisions(scene, catalog).collision_free_rate,
        GRAV=score_gravity(scene, catalog),
        OOB=check_bounds(scene, catalog).in_bounds_rate,
    )
    if spec is None:
        return m
    requested = {c: n for c, n in spec.counts.items() if n > 0}
    counts = category_counts(scene)
    if requested:
        m.CNT = sum(min(counts.get(c, 0), n) / n for c, n in requested.items()) / len(requested)
        used = {a.asset_id for a in scene.actors.values() if a.category in requested}
        available = {a.asset_id for c in requested for a in catalog.list_assets(c)}
        m.DIV = min(1.0, len(used) / len(available)) if available else 1.0
    else:
        m.CNT = 1.0
    if spec.edit is not None:
        if baseline is None:
            raise ValueError("PRES/ECNT need the pre-edit baseline scene")
        targets = set(spec.edit.targets)
        keep = [n for n in baseline.actors if n not in targets]
        unchanged = sum(n in scene.actors and scene.actors[n].transform == baseline.actors[n].transform
                        for n in keep)
        m.PRES = unchanged / len(keep) if keep else 1.0
        added = set(scene.actors) - set(baseline.actors)
        removed = set(baseline.actors) - set(scene.actors)
        moved = {n for n in set(scene.actors) & set(baseline.actors)
                 if scene.actors[n].transform != baseline.actors[n].transform}
        lo, hi = spec.edit.count_bounds
        m.ECNT = 1.0 if lo <= len(added) + len(removed) + len(moved) <= hi else 0.0
    return m


def summarize_scene(scene: SceneGraph, catalog: Catalog, spec: GenerationSpec | None = None,
                    baseline: SceneGraph | None = None) -> dict:
    """The actor list plus rule metrics, as handed to a judge."""
    coll = check_collisions(scene, catalog)
    return {
        "actor_count": len(scene),
        "by_category": dict(sorted(category_counts(scene).items())),
        "actors": [{"name": a.name, "category": a.category, "location": a.transform.location.as_list()}
                   for a in scene.get_actors()],
        "collision_pairs": [[p.actor_a, p.actor_b] for p in coll.pairs],
        "pair_categories": [[scene.actors[p.actor_a].category, scene.actors[p.actor_b].category]
                            for p in coll.pairs],
        "floating": [n for n, _ in check_vertical_support(scene, catalog).floating],
        "metrics": compute_rule_metrics(scene, catalog, spec, baseline).to_dict(),
    }


# -- judges ----------------------------------------------------------------


class JudgeUnavailable(RuntimeError):
    code = "judge_unavailable"


class Judge(Protocol):
    def __call__(self, request_text: str, scene_summary: Mapping, screenshots: Sequence[str]) -> Verdict: ...


def issue_tag(issue: str) -> str:
    """Leading ``METRIC[category]`` tag of an issue string."""
    return issue.split(":", 1)[0].strip()


def _dominant_category(pair_cats: Sequence[Sequence[str]]) -> str:
    c = Counter(cat for pair in pair_cats for cat in pair)
    if not c:
        return "any"
    return sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def rule_judge(request_text: str, scene_summary: Mapping, screenshots: Sequence[str] = ()) -> Verdict:
    """Deterministic stand-in judge driven by the rule metrics in the summary."""
    m = scene_summary.get("metrics", {})
    col, grav = m.get("COL", 1.0), m.get("GRAV", 1.0)
    cnt, oob = m.get("CNT"), m.get("OOB", 1.0)
    issues = []
    if col < 0.95:
        n = len(scene_summary.get("collision_pairs", []))
        cat = _dominant_category(scene_summary.get("pair_categories", []))
        issues.append(f"COL[{cat}]: {n} colliding pair(s); collision-free rate {col:.2f}")
    if grav < 1.0:
        issues.append(f"GRAV[any]: {len(scene_summary.get('floating', []))} actor(s) off the ground")
    if cnt is not None and cnt < 0.8:
        issues.append(f"CNT[any]: requested object counts only {cnt:.2f} satisfied")
    if oob < 1.0:
        issues.append(f"OOB[any]: in-bounds rate {oob:.2f}")
    if col < 0.5:
        status = FAIL
    elif col >= 0.95 and grav == 1.0 and (cnt is None or cnt >= 0.8):
        status = PASS
    else:
        status = NEEDS_IMPROVEMENT
    scores = {"LAES": RubricScore(round(10 * (col + grav + oob) / 3))}
    if cnt is not None:
        scores["PF"] = RubricScore(round(10 * cnt))
    return Verdict(status, issues, scores)


_JUDGES: dict[str, Judge] = {"rule": rule_judge}


def register_judge(name: str, judge: Judge) -> None:
    _JUDGES[name] = judge


def unregister_judge(name: str) -> None:
    _JUDGES.pop(name, None)


def get_judge(name: str) -> Judge:
    try:
        return _JUDGES[name]
    except KeyError:
        raise JudgeUnavailable(f"no judge registered under {name!r}") from None


def judge_scene(judge: str | Judge | None, request_text: str, scene_summary: Mapping,
                screenshots: Sequence[str] = ()) -> Verdict:
    if judge is None:
        raise JudgeUnavailable("no judge configured")
    fn = get_judge(judge) if isinstance(judge, str) else judge
    verdict = fn(request_text, scene_summary, screenshots)
    if not isinstance(verdict, Verdict):
        raise JudgeUnavailable(f"judge returned {type(verdict).__name__}, not a Verdict")
    return verdict


class ExternalJudge:
    """Judge living in another process, reached over the NDJSON tool protocol.

    Sends ``{"id", "tool": "judge_scene", "args": {...}}`` and expects a
    response whose payload is a serialized verdict.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host, self.port, self.timeout = host, port, timeout
        self._next_id = 1

    def __call__(self, request_text: str, scene_summary: Mapping, screenshots: Sequence[str] = ()) -> Verdict:
        req = {"id": self._next_id, "tool": "judge_scene",
               "args": {"request_text": request_text, "scene_summary": scene_summary,
                        "screenshots": list(screenshots)}}
        self._next_id += 1
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.sendall((json.dumps(req) + "\n").encode())
                buf = b""
                while not buf.endswith(b"\n"):
                    chunk = sock.recv(65536)
                    if not chunk:
                        break
                    buf += chunk
        except OSError as exc:
            raise JudgeUnavailable(f"external judge at {self.host}:{self.port} unreachable: {exc}") from exc
        try:
            resp = json.loads(buf.decode())
        except json.JSONDecodeError as exc:
            raise JudgeUnavailable(f"external judge sent a malformed frame: {exc}") from exc
        if not resp.get("ok"):
            raise JudgeUnavailable(f"external judge error: {resp.get('error')}")
        return Verdict.from_dict(resp["payload"])
