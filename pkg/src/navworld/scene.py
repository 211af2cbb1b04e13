"""In-memory scene store: actors, transforms, world-space boxes and the asset catalog.

All lengths are centimetres (1 m = 100 units). Yaw is measured in degrees
from +X towards +Y; with Z up, +Y lies to the right of +X, so a positive
yaw turns the actor clockwise when seen from above.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

CATEGORIES = (
    "building",
    "tree",
    "vehicle",
    "street_furniture",
    "road",
    "prop",
    "container",
)
# categories treated as walkable environment rather than placed objects
ENVIRONMENT_CATEGORIES = frozenset({"road"})

SCENE_FILE_VERSION = 1
DEFAULT_GROUND_HALF_EXTENT = 9500.0


class SceneError(ValueError):
    """Base class for scene-store errors; ``code`` is the wire error code."""

    code = "scene_error"


class DuplicateNameError(SceneError):
    code = "duplicate_name"


class UnknownActorError(SceneError):
    code = "unknown_actor"


class UnknownAssetError(SceneError):
    code = "unknown_asset"


class UnknownCategoryError(SceneError):
    code = "unknown_category"


class InvalidTransformError(SceneError):
    code = "invalid_transform"


class SetupError(SceneError):
    code = "setup_error"


class PatternError(SceneError):
    code = "bad_pattern"


def normalize_angle(deg: float) -> float:
    """Wrap an angle in degrees to [-180, 180)."""
    out = (deg + 180.0) % 360.0 - 180.0
    # float modulo can land exactly on 180 for inputs just below -180
    return -180.0 if out >= 180.0 else out


@dataclass(frozen=True)
class Vec3:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.z):
            if not math.isfinite(v):
                raise InvalidTransformError(f"non-finite component in {self!r}")

    @classmethod
    def of(cls, values: Iterable[float]) -> "Vec3":
        xs = [float(v) for v in values]
        if len(xs) != 3:
            raise InvalidTransformError(f"expected 3 components, got {len(xs)}")
        return cls(*xs)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.z]


@dataclass(frozen=True)
class Rotation:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        for name in ("yaw", "pitch", "roll"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidTransformError(f"non-finite {name}: {v}")
            object.__setattr__(self, name, normalize_angle(float(v)))

    @classmethod
    def of(cls, values: Iterable[float]) -> "Rotation":
        xs = [float(v) for v in values]
        if len(xs) != 3:
            raise InvalidTransformError(f"expected [yaw, pitch, roll], got {len(xs)} values")
        return cls(*xs)

    def as_list(self) -> list[float]:
        return [self.yaw, self.pitch, self.roll]


@dataclass(frozen=True)
class Transform:
    location: Vec3 = field(default_factory=Vec3)
    rotation: Rotation = field(default_factory=Rotation)
    scale: Vec3 = field(default_factory=lambda: Vec3(1.0, 1.0, 1.0))

    def __post_init__(self):
        if min(self.scale.as_list()) <= 0:
            raise InvalidTransformError(f"scale components must be > 0, got {self.scale.as_list()}")


@dataclass(frozen=True)
class AssetDescriptor:
    asset_id: str
    category: str
    base_extent: Vec3

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise UnknownCategoryError(f"unknown category {self.category!r}")
        if min(self.base_extent.as_list()) <= 0:
            raise ValueError(f"{self.asset_id}: base_extent components must be > 0")

    def to_dict(self) -> dict:
        return {"asset_id": self.asset_id, "category": self.category,
                "base_extent": self.base_extent.as_list()}


class Catalog:
    """Asset descriptors keyed by id."""

    def __init__(self, assets: Iterable[AssetDescriptor]):
        self._assets: dict[str, AssetDescriptor] = {}
        for a in assets:
            if a.asset_id in self._assets:
                raise ValueError(f"duplicate asset id {a.asset_id!r}")
            self._assets[a.asset_id] = a

    @classmethod
    def from_json(cls, text: str) -> "Catalog":
        rows = json.loads(text)
        return cls(AssetDescriptor(r["asset_id"], r["category"], Vec3.of(r["base_extent"]))
                   for r in rows)

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        return cls.from_json(Path(path).read_text())

    def to_json(self) -> str:
        return json.dumps([a.to_dict() for a in self.list_assets()], indent=1) + "\n"

    def __contains__(self, asset_id: str) -> bool:
        return asset_id in self._assets

    def __len__(self) -> int:
        return len(self._assets)

    def get(self, asset_id: str) -> AssetDescriptor:
        try:
            return self._assets[asset_id]
        except KeyError:
            raise UnknownAssetError(f"unknown asset {asset_id!r}") from None

    def list_assets(self, category: str | None = None) -> list[AssetDescriptor]:
        if category is not None and category not in CATEGORIES:
            raise UnknownCategoryError(f"unknown category {category!r}; expected one of {CATEGORIES}")
        out = [a for a in self._assets.values() if category is None or a.category == category]
        return sorted(out, key=lambda a: a.asset_id)

    def categories(self) -> list[str]:
        return sorted({a.category for a in self._assets.values()})


_default_catalog: Catalog | None = None


def default_catalog() -> Catalog:
    """The catalog shipped with the package (about 60 synthetic assets)."""
    global _default_catalog
    if _default_catalog is None:
        text = resources.files("navworld").joinpath("data/catalog.json").read_text()
        _default_catalog = Catalog.from_json(text)
    return _default_catalog


@dataclass(frozen=True)
class ActorRecord:
    name: str
    asset_id: str
    category: str
    transform: Transform
    spawned_in_session: bool = True

    def to_dict(self) -> dict:
        t = self.transform
        return {
            "name": self.name,
            "asset_id": self.asset_id,
            "category": self.category,
            "location": t.location.as_list(),
            "rotation": t.rotation.as_list(),
            "scale": t.scale.as_list(),
            "spawned_in_session": self.spawned_in_session,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActorRecord":
        t = Transform(Vec3.of(d["location"]), Rotation.of(d["rotation"]), Vec3.of(d["scale"]))
        return cls(d["name"], d["asset_id"], d["category"], t, bool(d["spawned_in_session"]))


@dataclass(frozen=True)
class Aabb:
    min: Vec3
    max: Vec3

    @property
    def center(self) -> Vec3:
        return Vec3((self.min.x + self.max.x) / 2, (self.min.y + self.max.y) / 2,
                    (self.min.z + self.max.z) / 2)

    @property
    def half_extent(self) -> Vec3:
        return Vec3((self.max.x - self.min.x) / 2, (self.max.y - self.min.y) / 2,
                    (self.max.z - self.min.z) / 2)


def world_aabb(actor: ActorRecord, catalog: Catalog) -> Aabb:
    """Axis-aligned box of the scaled, yaw-rotated, translated asset box.

    Pitch and roll are ignored: every placed asset is treated as upright.
    """
    base = catalog.get(actor.asset_id).base_extent
    t = actor.transform
    ex, ey, ez = base.x * t.scale.x, base.y * t.scale.y, base.z * t.scale.z
    a = math.radians(t.rotation.yaw)
    c, s = math.cos(a), math.sin(a)
    hx = ex * abs(c) + ey * abs(s)
    hy = ex * abs(s) + ey * abs(c)
    loc = t.location
    return Aabb(Vec3(loc.x - hx, loc.y - hy, loc.z - ez), Vec3(loc.x + hx, loc.y + hy, loc.z + ez))


def _check_pattern(pattern: str) -> None:
    if not isinstance(pattern, str) or not pattern:
        raise PatternError("pattern must be a non-empty string")
    if "[" in pattern or "]" in pattern:
        raise PatternError(f"unsupported glob syntax in {pattern!r}; only '*' and '?' are allowed")


def match_names(names: Iterable[str], pattern: str) -> list[str]:
    _check_pattern(pattern)
    return sorted(n for n in names if fnmatch.fnmatchcase(n, pattern))


class SceneGraph:
    """Ground plane, environment settings and a name-keyed actor collection.

    Single writer: callers that share a scene across threads must serialize
    mutations themselves.
    """

    def __init__(self, ground_half_extent: float = DEFAULT_GROUND_HALF_EXTENT,
                 ground_z: float = 0.0, env_settings: Mapping | None = None):
        if not ground_half_extent > 0:
            raise SetupError("ground_half_extent must be > 0")
        self.ground_half_extent = float(ground_half_extent)
        self.ground_z = float(ground_z)
        self.env_settings: dict = dict(env_settings or {})
        self.actors: dict[str, ActorRecord] = {}

    @property
    def initialized(self) -> bool:
        return bool(self.env_settings)

    # -- environment -------------------------------------------------------

    def setup_environment(self, ground_size: float = 2 * DEFAULT_GROUND_HALF_EXTENT,
                          time_of_day: str = "noon", sky: str = "clear",
                          reinitialize: bool = False) -> "SceneGraph":
        if self.initialized and not reinitialize:
            raise SetupError("environment already initialized; pass reinitialize=True to reset it")
        ground_size = float(ground_size)
        if not math.isfinite(ground_size) or ground_size <= 0:
            raise SetupError(f"ground_size must be a positive length, got {ground_size}")
        self.ground_half_extent = ground_size / 2
        self.env_settings = {"time_of_day": str(time_of_day), "sky": str(sky)}
        return self

    # -- actors ------------------------------------------------------------

    def spawn_actor(self, name: str, asset_id: str, transform: Transform, catalog: Catalog,
                    spawned_in_session: bool = True) -> ActorRecord:
        if not self.initialized:
            raise SetupError("setup_environment must be called before spawning")
        if not isinstance(name, str) or not name:
            raise SceneError("actor name must be a non-empty string")
        if name in self.actors:
            raise DuplicateNameError(f"actor {name!r} already exists")
        asset = catalog.get(asset_id)
        rec = ActorRecord(name, asset_id, asset.category, transform, spawned_in_session)
        self.actors[name] = rec
        return rec

    def get(self, name: str) -> ActorRecord:
        try:
            return self.actors[name]
        except KeyError:
            raise UnknownActorError(f"unknown actor {name!r}") from None

    def delete_actor(self, name: str) -> ActorRecord:
        rec = self.get(name)
        del self.actors[name]
        return rec

    def delete_all_spawned(self) -> list[str]:
        gone = sorted(n for n, a in self.actors.items() if a.spawned_in_session)
        for n in gone:
            del self.actors[n]
        return gone

    def set_actor_transform(self, name: str, location: Vec3 | None = None,
                            rotation: Rotation | None = None,
                            scale: Vec3 | None = None) -> ActorRecord:
        rec = self.get(name)
        t = rec.transform
        new_t = Transform(location if location is not None else t.location,
                          rotation if rotation is not None else t.rotation,
                          scale if scale is not None else t.scale)
        rec = replace(rec, transform=new_t)
        self.actors[name] = rec
        return rec

    def get_actors(self) -> list[ActorRecord]:
        return [self.actors[n] for n in sorted(self.actors)]

    def find_actors_by_name(self, pattern: str) -> list[ActorRecord]:
        return [self.actors[n] for n in match_names(self.actors, pattern)]

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SCENE_FILE_VERSION,
            "ground_half_extent": self.ground_half_extent,
            "ground_z": self.ground_z,
            "env_settings": dict(sorted(self.env_settings.items())),
            "actors": [a.to_dict() for a in self.get_actors()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneGraph":
        if d.get("version") != SCENE_FILE_VERSION:
            raise SceneError(f"unsupported scene file version {d.get('version')!r}")
        scene = cls(d["ground_half_extent"], d.get("ground_z", 0.0), d.get("env_settings") or {})
        for row in d.get("actors", []):
            rec = ActorRecord.from_dict(row)
            if rec.name in scene.actors:
                raise DuplicateNameError(f"duplicate actor {rec.name!r} in scene file")
            scene.actors[rec.name] = rec
        return scene

    @classmethod
    def from_json(cls, text: str) -> "SceneGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SceneGraph":
        return cls.from_json(Path(path).read_text())

    def copy(self) -> "SceneGraph":
        other = SceneGraph(self.ground_half_extent, self.ground_z, self.env_settings)
        other.actors = dict(self.actors)
        return other

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def __len__(self) -> int:
        return len(self.actors)
