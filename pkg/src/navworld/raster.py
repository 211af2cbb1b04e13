"""Semantic rasters standing in for viewport screenshots.

Images are 8-bit grayscale, one gray level per category, written as binary
PGM. Row 0 is the minimum-y edge, column 0 the minimum-x edge.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .scene import Catalog, SceneGraph, world_aabb

GRAY_LEVELS = {
    "road": 40,
    "container": 90,
    "tree": 120,
    "prop": 150,
    "vehicle": 170,
    "street_furniture": 200,
    "building": 230,
}
BACKGROUND = 0
# paint order: flat ground cover first, tall structures last
PAINT_ORDER = ("road", "prop", "street_furniture", "vehicle", "container", "tree", "building")
TOUR_VIEWS = 6
OBLIQUE_ELEVATION_DEG = 45.0


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _ordered_actors(scene: SceneGraph):
    rank = {c: i for i, c in enumerate(PAINT_ORDER)}
    return sorted(scene.actors.values(), key=lambda a: (rank.get(a.category, 0), a.name))


def top_down(scene: SceneGraph, catalog: Catalog, size: int = 512,
             half_extent: float | None = None) -> np.ndarray:
    """Orthographic top view; a pixel takes an actor's gray level when its centre lies in the footprint."""
    h = scene.ground_half_extent if half_extent is None else half_extent
    px = 2 * h / size
    img = np.full((size, size), BACKGROUND, dtype=np.uint8)
    for actor in _ordered_actors(scene):
        box = world_aabb(actor, catalog)
        # pixel i covers [-h + i*px, -h + (i+1)*px); its centre is inside [min, max) iff
        # ceil((min + h)/px - 0.5) <= i < ceil((max + h)/px - 0.5)
        c0 = max(0, math.ceil((box.min.x + h) / px - 0.5))
        c1 = min(size, math.ceil((box.max.x + h) / px - 0.5))
        r0 = max(0, math.ceil((box.min.y + h) / px - 0.5))
        r1 = min(size, math.ceil((box.max.y + h) / px - 0.5))
        if c0 < c1 and r0 < r1:
            img[r0:r1, c0:c1] = GRAY_LEVELS[actor.category]
    return img


def _hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, np.round(points, 9))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def oblique(scene: SceneGraph, catalog: Catalog, azimuth_deg: float, size: int = 512,
            elevation_deg: float = OBLIQUE_ELEVATION_DEG, half_extent: float | None = None) -> np.ndarray:
    """Parallel oblique projection onto the ground plane, painted far-to-near."""
    h = scene.ground_half_extent if half_extent is None else half_extent
    px = 2 * h / size
    k = 1.0 / math.tan(math.radians(elevation_deg))
    az = math.radians(azimuth_deg)
    shift = np.array([k * math.cos(az), k * math.sin(az)])
    img = np.full((size, size), BACKGROUND, dtype=np.uint8)
    centres = -h + (np.arange(size) + 0.5) * px

    prims = []
    for actor in scene.actors.values():
        b = world_aabb(actor, catalog)
        corners = np.array([[x, y, z] for x in (b.min.x, b.max.x) for y in (b.min.y, b.max.y)
                            for z in (b.min.z, b.max.z)])
        proj = corners[:, :2] + corners[:, 2:3] * shift
        # viewer looks along -shift, so boxes further along +shift are further away
        depth = -float(np.dot([b.center.x, b.center.y], shift / (np.linalg.norm(shift) or 1.0)))
        prims.append((depth, actor.name, actor.category, proj))
    for depth, _, cat, proj in sorted(prims, key=lambda p: (-p[0], p[1])):
        hull = _hull(proj)
        if len(hull) < 3:
            continue
        c0 = max(0, int(np.searchsorted(centres, hull[:, 0].min())))
        c1 = min(size, int(np.searchsorted(centres, hull[:, 0].max(), side="right")))
        r0 = max(0, int(np.searchsorted(centres, hull[:, 1].min())))
        r1 = min(size, int(np.searchsorted(centres, hull[:, 1].max(), side="right")))
        if c0 >= c1 or r0 >= r1:
            continue
        xs, ys = np.meshgrid(centres[c0:c1], centres[r0:r1])
        inside = np.ones(xs.shape, dtype=bool)
        for i in range(len(hull)):
            ax, ay = hull[i]
            bx, by = hull[(i + 1) % len(hull)]
            inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
        img[r0:r1, c0:c1][inside] = GRAY_LEVELS[cat]
    return img


def screenshot_tour(scene: SceneGraph, catalog: Catalog, out_dir: str | Path, stem: str = "view",
                    views: int = TOUR_VIEWS, size: int = 512) -> list[Path]:
    """Top view followed by ``views - 1`` oblique views at evenly spaced azimuths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(views):
        if i == 0:
            img = top_down(scene, catalog, size)
        else:
            img = oblique(scene, catalog, 360.0 * (i - 1) / max(1, views - 1), size)
        p = out / f"{stem}_{i}.pgm"
        write_pgm(p, img)
        paths.append(p)
    return paths
