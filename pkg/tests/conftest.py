"""Shared helpers: seeded random scenes and grids built from the shipped catalog."""

from __future__ import annotations

import numpy as np
import pytest

from navworld.navgrid import OccupancyGrid
from navworld.scene import Rotation, SceneGraph, Transform, Vec3, default_catalog


def random_scene(rng: np.random.Generator, n_actors: int, half: float = 3000.0,
                 catalog=None) -> SceneGraph:
    """Actors with random assets, yaw, scale and height; some land out of bounds or float."""
    catalog = catalog or default_catalog()
    assets = catalog.list_assets()
    scene = SceneGraph().setup_environment(ground_size=2 * half)
    for i in range(n_actors):
        asset = assets[int(rng.integers(len(assets)))]
        loc = Vec3(*rng.uniform(-1.1 * half, 1.1 * half, 2), float(rng.choice([0.0, rng.uniform(0, 600)])))
        t = Transform(loc, Rotation(float(rng.uniform(-180, 180))), Vec3(*rng.uniform(0.5, 2.0, 3)))
        scene.spawn_actor(f"a{i:02d}", asset.asset_id, t, catalog)
        # rest most actors on the ground so gravity scores vary
        if rng.random() < 0.7:
            rec = scene.actors[f"a{i:02d}"]
            ez = asset.base_extent.z * rec.transform.scale.z
            scene.set_actor_transform(rec.name, location=Vec3(loc.x, loc.y, ez))
    return scene


def random_grid(rng: np.random.Generator, rows: int = 50, cols: int = 50, p_block: float | None = None,
                cell_size: float = 25.0) -> OccupancyGrid:
    p = rng.uniform(0.0, 0.4) if p_block is None else p_block
    return OccupancyGrid(rng.random((rows, cols)) < p, cell_size=cell_size, origin=(0.0, 0.0))


@pytest.fixture
def catalog():
    return default_catalog()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
