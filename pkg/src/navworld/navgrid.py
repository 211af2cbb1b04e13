"""Walkable occupancy grid, geodesic paths and navigation-episode sampling.

Cells are 25 cm squares indexed ``[row, col]`` with row along +y and col
along +x from the grid's lower-left corner. Movement is 8-connected; a
diagonal step needs both orthogonal neighbours free (no corner cutting).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .raster import PAINT_ORDER
from .scene import ENVIRONMENT_CATEGORIES, ActorRecord, Catalog, Rotation, SceneGraph, Transform, Vec3, world_aabb

SQRT2 = math.sqrt(2.0)
CELL_SIZE = 25.0
DEFAULT_BOUNDS = (300.0, 2000.0)
CLUTTER_WINDOW = 13
LABEL_FREE = 0
LABEL_OUTSIDE = 255
# category codes in the label grid; road is walkable, the rest block
LABELS = {c: i + 1 for i, c in enumerate(PAINT_ORDER)}
CATEGORY_OF_LABEL = {v: k for k, v in LABELS.items()}

# (drow, dcol) for the 8 moves; diagonals last
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass(frozen=True)
class DifficultyLevel:
    index: int
    path_len_range: tuple[float, float]
    heading_offset_max: float
    obstacle_density: float


DIFFICULTY_LEVELS = (
    DifficultyLevel(0, (400.0, 800.0), 15.0, 0.00),
    DifficultyLevel(1, (600.0, 1000.0), 30.0, 0.05),
    DifficultyLevel(2, (800.0, 1400.0), 45.0, 0.10),
    DifficultyLevel(3, (1000.0, 1800.0), 60.0, 0.15),
    DifficultyLevel(4, (1200.0, 2200.0), 90.0, 0.20),
    DifficultyLevel(5, (1500.0, 2600.0), 120.0, 0.25),
    DifficultyLevel(6, (2000.0, 3000.0), 150.0, 0.30),
    DifficultyLevel(7, (2500.0, 3500.0), 180.0, 0.35),
)


def level(i: int) -> DifficultyLevel:
    if not 0 <= i < len(DIFFICULTY_LEVELS):
        raise ValueError(f"difficulty level must be in 0..7, got {i}")
    return DIFFICULTY_LEVELS[i]


class NavError(ValueError):
    pass


class Unreachable(NavError):
    pass


class SamplingFailure(NavError):
    def __init__(self, message: str, stats: dict):
        super().__init__(f"{message}: {stats}")
        self.stats = stats


class OccupancyGrid:
    """Immutable occupancy bitmap plus per-cell category labels."""

    def __init__(self, occ: np.ndarray, cell_size: float, origin: tuple[float, float],
                 labels: np.ndarray | None = None, ground_z: float = 0.0):
        if cell_size <= 0:
            raise NavError("cell_size must be > 0")
        self.occ = np.ascontiguousarray(occ, dtype=bool)
        self.occ.setflags(write=False)
        self.cell_size = float(cell_size)
        self.origin = (float(origin[0]), float(origin[1]))
        self.height, self.width = self.occ.shape
        self.labels = labels if labels is not None else np.where(self.occ, LABELS["prop"], LABEL_FREE).astype(
            np.uint8)
        self.labels.setflags(write=False)
        self.ground_z = ground_z

    # geometry -------------------------------------------------------------

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (math.floor((y - self.origin[1]) / self.cell_size), math.floor((x - self.origin[0]) / self.cell_size))

    def center(self, r: int, c: int) -> tuple[float, float]:
        return (self.origin[0] + (c + 0.5) * self.cell_size, self.origin[1] + (r + 0.5) * self.cell_size)

    def inside(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width

    def free(self, r: int, c: int) -> bool:
        return self.inside(r, c) and not self.occ[r, c]

    def free_at(self, x: float, y: float) -> bool:
        return self.free(*self.cell_of(x, y))

    def can_step(self, a: tuple[int, int], b: tuple[int, int]) -> bool:
        """Legal single move between neighbouring (or identical) cells."""
        dr, dc = b[0] - a[0], b[1] - a[1]
        if max(abs(dr), abs(dc)) > 1 or not self.free(*b):
            return False
        if dr and dc:
            return self.free(a[0] + dr, a[1]) and self.free(a[0], a[1] + dc)
        return True

    @property
    def free_count(self) -> int:
        return int(self.free_mask.sum())

    @cached_property
    def free_mask(self) -> np.ndarray:
        return ~self.occ

    @cached_property
    def flat_free(self) -> list[bool]:
        return (~self.occ).ravel().tolist()

    # derived maps ----------------------------------------------------------

    @cached_property
    def clutter(self) -> np.ndarray:
        """Occupied fraction in a 13x13 window around each cell (outside counts as occupied)."""
        return ndimage.uniform_filter(self.occ.astype(float), size=CLUTTER_WINDOW, mode="constant", cval=1.0)

    @cached_property
    def nearest_free_index(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.free_mask.any():
            raise NavError("grid has no free cells")
        _, idx = ndimage.distance_transform_edt(self.occ, return_indices=True)
        return idx[0], idx[1]

    def nearest_free(self, r: int, c: int) -> tuple[int, int]:
        r = min(max(r, 0), self.height - 1)
        c = min(max(c, 0), self.width - 1)
        rr, cc = self.nearest_free_index
        return int(rr[r, c]), int(cc[r, c])

    @cached_property
    def graph(self) -> csr_matrix:
        """Sparse 8-connected move graph over free cells, weights in cm."""
        h, w = self.occ.shape
        free = ~self.occ
        ids = np.arange(h * w).reshape(h, w)
        rows, cols, wts = [], [], []

        def add(mask, a, b, cost):
            rows.append(a[mask])
            cols.append(b[mask])
            wts.append(np.full(int(mask.sum()), cost))

        cs = self.cell_size
        # horizontal and vertical
        add(free[:, :-1] & free[:, 1:], ids[:, :-1], ids[:, 1:], cs)
        add(free[:-1, :] & free[1:, :], ids[:-1, :], ids[1:, :], cs)
        # diagonals with both orthogonal neighbours free
        m = free[:-1, :-1] & free[1:, 1:] & free[1:, :-1] & free[:-1, 1:]
        add(m, ids[:-1, :-1], ids[1:, 1:], cs * SQRT2)
        add(m, ids[:-1, 1:], ids[1:, :-1], cs * SQRT2)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        d = np.concatenate(wts)
        return csr_matrix((np.concatenate([d, d]), (np.concatenate([r, c]), np.concatenate([c, r]))),
                          shape=(h * w, h * w))

    def distance_field(self, source: tuple[int, int], limit: float = np.inf) -> np.ndarray:
        """Geodesic distance (cm) from ``source`` to every cell; inf where unreachable or beyond ``limit``."""
        if not self.free(*source):
            raise NavError(f"source cell {source} is not free")
        d = dijkstra(self.graph, directed=False, indices=source[0] * self.width + source[1], limit=limit)
        return d.reshape(self.height, self.width)

    def to_dict(self) -> dict:
        return {"cell_size": self.cell_size, "origin": list(self.origin), "width": self.width,
                "height": self.height, "occupied": int(self.occ.sum())}


def build_grid(scene: SceneGraph, catalog: Catalog, cell_size: float = CELL_SIZE,
               half_extent: float | None = None, center: tuple[float, float] = (0.0, 0.0)) -> OccupancyGrid:
    """Rasterize non-road actor footprints; a cell is occupied iff a footprint overlaps its interior.

    The grid covers ``center +- half_extent`` (default: the whole ground plane).
    Cells reaching past the ground plane are occupied.
    """
    if cell_size <= 0:
        raise NavError("cell_size must be > 0")
    h = scene.ground_half_extent if half_extent is None else float(half_extent)
    n = math.ceil(2 * h / cell_size)
    x0, y0 = center[0] - h, center[1] - h
    occ = np.zeros((n, n), dtype=bool)
    labels = np.zeros((n, n), dtype=np.uint8)
    rank = {c: i for i, c in enumerate(PAINT_ORDER)}

    def span(lo, hi, o):
        a = max(0, math.floor((lo - o) / cell_size))
        b = min(n, math.ceil((hi - o) / cell_size))
        return a, b

    for a in sorted(scene.actors.values(), key=lambda a: (rank.get(a.category, 0), a.name)):
        box = world_aabb(a, catalog)
        c0, c1 = span(box.min.x, box.max.x, x0)
        r0, r1 = span(box.min.y, box.max.y, y0)
        if c0 >= c1 or r0 >= r1:
            continue
        labels[r0:r1, c0:c1] = LABELS[a.category]
        if a.category not in ENVIRONMENT_CATEGORIES:
            occ[r0:r1, c0:c1] = True
    g = scene.ground_half_extent
    edges = x0 + cell_size * np.arange(n + 1)
    xs_out = (edges[:-1] < -g) | (edges[1:] > g)
    edges_y = y0 + cell_size * np.arange(n + 1)
    ys_out = (edges_y[:-1] < -g) | (edges_y[1:] > g)
    outside = ys_out[:, None] | xs_out[None, :]
    occ |= outside
    labels[outside] = LABEL_OUTSIDE
    return OccupancyGrid(occ, cell_size, (x0, y0), labels, scene.ground_z)


# -- shortest paths --------------------------------------------------------


def _octile(dr: int, dc: int) -> float:
    dr, dc = abs(dr), abs(dc)
    return (max(dr, dc) - min(dr, dc)) + SQRT2 * min(dr, dc)


def shortest_path(grid: OccupancyGrid, a: tuple[int, int], b: tuple[int, int]) -> tuple[list[tuple[int, int]], float]:
    """A* over the 8-connected grid; returns (cell path, length in cm). Raises Unreachable."""
    if not grid.free(*a) or not grid.free(*b):
        raise NavError(f"endpoints must be free cells: {a} -> {b}")
    if a == b:
        return [a], 0.0
    w, h = grid.width, grid.height
    free = grid.flat_free
    start, goal = a[0] * w + a[1], b[0] * w + b[1]
    gr, gc = b
    g = {start: 0.0}
    parent = {start: -1}
    closed = set()
    heap = [(_octile(a[0] - gr, a[1] - gc), 0.0, start)]
    while heap:
        _, gcur, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            break
        closed.add(cur)
        r, c = divmod(cur, w)
        for k, (dr, dc) in enumerate(MOVES):
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w):
                continue
            nxt = nr * w + nc
            if not free[nxt] or nxt in closed:
                continue
            if k >= 4:
                if not (free[r * w + nc] and free[nr * w + c]):
                    continue
                ng = gcur + SQRT2
            else:
                ng = gcur + 1.0
            if ng < g.get(nxt, math.inf):
                g[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(heap, (ng + _octile(nr - gr, nc - gc), ng, nxt))
    else:
        raise Unreachable(f"no path from {a} to {b}")
    path = []
    cur = goal
    while cur != -1:
        path.append(divmod(cur, w))
        cur = parent[cur]
    path.reverse()
    return path, path_length(path, grid.cell_size)


def path_length(cells: Sequence[tuple[int, int]], cell_size: float) -> float:
    """Length from move counts, so equal paths give bit-identical lengths."""
    n_straight = n_diag = 0
    for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
        if r0 != r1 and c0 != c1:
            n_diag += 1
        else:
            n_straight += 1
    return cell_size * (n_straight + n_diag * SQRT2)


def geodesic_distance(grid: OccupancyGrid, p: tuple[float, float], q: tuple[float, float]) -> float:
    """Shortest walkable distance (cm) between two world points; an occupied ``q`` snaps to its nearest free cell."""
    a = grid.cell_of(*p)
    if not grid.free(*a):
        raise NavError(f"start point {p} is not on a free cell")
    b = grid.cell_of(*q)
    if not grid.free(*b):
        b = grid.nearest_free(*b)
    return shortest_path(grid, a, b)[1]


# -- episodes --------------------------------------------------------------


@dataclass
class Episode:
    id: str
    scene_ref: str
    task_type: str
    start: list[float]  # [x, y, z, yaw]
    goal: dict  # {"position": [x, y]} plus "category"/"instance" for ObjectNav
    reference_path: list[list[float]]
    L_star: float
    d0: float
    level: int | None = None
    seed: int | None = None

    @property
    def goal_xy(self) -> tuple[float, float]:
        return tuple(self.goal["position"])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(**d)


def save_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_dict(), separators=(",", ":")) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    return [Episode.from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


YAW_STEP = 15.0  # start headings lie on the agent's turn lattice


def lattice_yaw(gen: np.random.Generator, bearing_deg: float | None = None,
                max_offset: float | None = None) -> float:
    """Uniform heading on the 15-degree lattice, optionally within ``max_offset`` of ``bearing_deg``."""
    lattice = np.arange(-180.0, 180.0, YAW_STEP)
    if bearing_deg is not None and max_offset is not None:
        off = (lattice - bearing_deg + 180.0) % 360.0 - 180.0
        lattice = lattice[np.abs(off) <= max_offset + 1e-9]
        if lattice.size == 0:
            raise NavError(f"no lattice heading within {max_offset} deg of {bearing_deg}")
    return float(lattice[gen.integers(lattice.size)])


def _bearing_deg(p: tuple[float, float], q: tuple[float, float]) -> float:
    return math.degrees(math.atan2(q[1] - p[1], q[0] - p[0]))


def _instance_cells(grid: OccupancyGrid, box) -> tuple[int, int, int, int]:
    cs, (x0, y0) = grid.cell_size, grid.origin
    c0 = math.floor((box.min.x - x0) / cs)
    c1 = math.ceil((box.max.x - x0) / cs)
    r0 = math.floor((box.min.y - y0) / cs)
    r1 = math.ceil((box.max.y - y0) / cs)
    return r0, r1, c0, c1


def object_goal_cell(grid: OccupancyGrid, box) -> tuple[int, int] | None:
    """Free cell whose centre is closest to the instance footprint (ties by row, col)."""
    r0, r1, c0, c1 = _instance_cells(grid, box)
    for ring in range(1, max(grid.width, grid.height)):
        rs = range(max(0, r0 - ring), min(grid.height, r1 + ring))
        cs = range(max(0, c0 - ring), min(grid.width, c1 + ring))
        best = None
        for r in rs:
            for c in cs:
                if not grid.free(r, c):
                    continue
                x, y = grid.center(r, c)
                dx = max(box.min.x - x, 0.0, x - box.max.x)
                dy = max(box.min.y - y, 0.0, y - box.max.y)
                key = (dx * dx + dy * dy, r, c)
                if best is None or key < best:
                    best = key
        if best is not None:
            return best[1], best[2]
        if not rs or not cs:
            break
    return None


def line_of_sight(grid: OccupancyGrid, p: tuple[float, float], box) -> bool:
    """Grid raycast from ``p`` to the box centre; only cells under the box itself may be occupied."""
    tx, ty = (box.min.x + box.max.x) / 2, (box.min.y + box.max.y) / 2
    dist = math.hypot(tx - p[0], ty - p[1])
    n = max(1, math.ceil(dist / (grid.cell_size / 4)))
    for i in range(n + 1):
        x = p[0] + (tx - p[0]) * i / n
        y = p[1] + (ty - p[1]) * i / n
        r, c = grid.cell_of(x, y)
        cx0 = grid.origin[0] + c * grid.cell_size
        cy0 = grid.origin[1] + r * grid.cell_size
        on_target = (box.min.x < cx0 + grid.cell_size and box.max.x > cx0 and
                     box.min.y < cy0 + grid.cell_size and box.max.y > cy0)
        if on_target:
            return True
        if not grid.free(r, c):
            return False
    return True


def sample_episode(grid: OccupancyGrid, scene: SceneGraph | None = None, task_type: str = "PointNav",
                   bounds: tuple[float, float] = DEFAULT_BOUNDS, rng: int | np.random.Generator = 0,
                   max_tries: int = 200, level_index: int | None = None, catalog: Catalog | None = None,
                   category: str | None = None, scene_ref: str = "", episode_id: str | None = None) -> Episode:
    """Draw a start uniformly from the walkable cells and a goal whose geodesic length lies in ``bounds``.

    For a level-tagged episode the bounds and the heading offset come from the
    difficulty table. Raises SamplingFailure after ``max_tries`` rejected starts.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng) if seed is not None else rng
    max_offset = None
    if level_index is not None:
        lv = level(level_index)
        bounds, max_offset = lv.path_len_range, lv.heading_offset_max
    lo, hi = float(bounds[0]), float(bounds[1])
    if not 0 <= lo <= hi:
        raise NavError(f"bad path-length bounds {bounds}")
    if task_type not in ("PointNav", "ObjectNav"):
        raise NavError(f"unknown task type {task_type!r}")
    free_idx = np.flatnonzero(grid.free_mask.ravel())
    if free_idx.size < 2:
        raise SamplingFailure("not enough walkable cells", {"free_cells": int(free_idx.size)})

    targets = []
    if task_type == "ObjectNav":
        if scene is None or catalog is None:
            raise NavError("ObjectNav sampling needs the scene and catalog")
        present = sorted({a.category for a in scene.actors.values() if a.category not in ENVIRONMENT_CATEGORIES})
        if category is not None and category not in present:
            raise NavError(f"scene has no instance of category {category!r}")
        if not present:
            raise NavError("scene has no object categories for ObjectNav")
        cat = category if category is not None else present[int(gen.integers(len(present)))]
        for a in sorted((a for a in scene.actors.values() if a.category == cat), key=lambda a: a.name):
            box = world_aabb(a, catalog)
            cell = object_goal_cell(grid, box)
            if cell is not None:
                targets.append((a.name, box, cell))
        if not targets:
            raise NavError(f"no instance of {cat!r} has a reachable neighbourhood")

    stats = {"tries": 0, "no_goal_in_bounds": 0, "length_out_of_bounds": 0, "not_visible": 0}
    for _ in range(max_tries):
        stats["tries"] += 1
        s = int(free_idx[gen.integers(free_idx.size)])
        sr, sc = divmod(s, grid.width)
        field_ = grid.distance_field((sr, sc), limit=hi * (1 + 1e-9) + 1e-6)
        if task_type == "PointNav":
            flat = field_.ravel()
            cand = np.flatnonzero((flat >= lo * (1 - 1e-9)) & (flat <= hi * (1 + 1e-9)))
            if cand.size == 0:
                stats["no_goal_in_bounds"] += 1
                continue
            gidx = int(cand[gen.integers(cand.size)])
            goal_cell = divmod(gidx, grid.width)
            target = None
        else:
            ok = [t for t in targets if lo * (1 - 1e-9) <= field_[t[2]] <= hi * (1 + 1e-9)]
            if not ok:
                stats["no_goal_in_bounds"] += 1
                continue
            target = ok[int(gen.integers(len(ok)))]
            goal_cell = target[2]
        path, length = shortest_path(grid, (sr, sc), goal_cell)
        if not lo <= length <= hi:
            stats["length_out_of_bounds"] += 1
            continue
        waypoints = [list(grid.center(r, c)) for r, c in path]
        if target is not None and not any(line_of_sight(grid, tuple(w), target[1]) for w in waypoints):
            stats["not_visible"] += 1
            continue
        start_xy = grid.center(sr, sc)
        goal_xy = grid.center(*goal_cell)
        if max_offset is None:
            yaw = lattice_yaw(gen)
        else:
            yaw = lattice_yaw(gen, _bearing_deg(start_xy, goal_xy), max_offset)
        goal = {"position": list(goal_xy)}
        if target is not None:
            goal.update({"category": scene.actors[target[0]].category, "instance": target[0]})
        eid = episode_id or f"ep-{seed if seed is not None else 'g'}-{sr}-{sc}-{goal_cell[0]}-{goal_cell[1]}"
        return Episode(eid, scene_ref, task_type, [start_xy[0], start_xy[1], grid.ground_z, yaw], goal,
                       waypoints, length, length, level_index, int(seed) if seed is not None else None)
    raise SamplingFailure("episode sampling exhausted its tries", stats)


# -- difficulty augmentation -----------------------------------------------

# (asset, block side in cells, centred on a grid corner?)
OBSTACLE_BLOCKS = (("prop_planter_box_01", 4, True), ("prop_barrier_block_01", 2, True),
                   ("prop_road_cone_01", 1, False))


@dataclass
class Augmentation:
    scene: SceneGraph
    grid: OccupancyGrid
    level: DifficultyLevel
    added_cells: int
    target_cells: int
    obstacles: list[str] = field(default_factory=list)

    @property
    def density(self) -> float:
        base = self.grid.free_count + self.added_cells
        return self.added_cells / base if base else 0.0

    def start_yaw(self, bearing_deg: float, rng: np.random.Generator) -> float:
        return lattice_yaw(rng, bearing_deg, self.level.heading_offset_max)


def apply_difficulty(scene: SceneGraph, grid: OccupancyGrid, level_index: int, rng: int | np.random.Generator,
                     catalog: Catalog, max_attempts: int = 200_000) -> Augmentation:
    """Scatter prop obstacles over free cells until they cover ``density`` of the walkable area (+-1 cell)."""
    lv = level(level_index)
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    out = scene.copy()
    base_free = grid.free_count
    target = int(round(lv.obstacle_density * base_free))
    occ = grid.occ.copy()
    added = 0
    names = []
    cs = grid.cell_size
    attempts = 0
    serial = 0
    for asset, side, corner in OBSTACLE_BLOCKS:
        area = side * side
        fails = 0
        while target - added >= area and fails < 400:
            attempts += 1
            if attempts > max_attempts:
                raise NavError(f"density {lv.obstacle_density} unreachable after {max_attempts} placements")
            r = int(gen.integers(0, grid.height - side + 1))
            c = int(gen.integers(0, grid.width - side + 1))
            if occ[r:r + side, c:c + side].any():
                fails += 1
                continue
            fails = 0
            occ[r:r + side, c:c + side] = True
            added += area
            if corner:
                x = grid.origin[0] + (c + side / 2) * cs
                y = grid.origin[1] + (r + side / 2) * cs
            else:
                x, y = grid.center(r, c)
            ext = catalog.get(asset).base_extent
            name = f"Obst_{serial:04d}"
            while name in out.actors:
                serial += 1
                name = f"Obst_{serial:04d}"
            serial += 1
            out.actors[name] = _obstacle_record(name, asset, catalog, x, y, scene.ground_z + ext.z)
            names.append(name)
    if abs(target - added) > 1:
        raise NavError(f"could only cover {added} of {target} target cells at density {lv.obstacle_density}")
    new_grid = build_grid(out, catalog, cs, grid.width * cs / 2,
                          (grid.origin[0] + grid.width * cs / 2, grid.origin[1] + grid.height * cs / 2))
    return Augmentation(out, new_grid, lv, int((new_grid.occ & ~grid.occ).sum()), target, names)


def _obstacle_record(name, asset, catalog, x, y, z):
    return ActorRecord(name, asset, catalog.get(asset).category, Transform(Vec3(x, y, z), Rotation()), True)
