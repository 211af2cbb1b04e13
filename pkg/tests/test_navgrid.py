import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_grid
from oracles import dijkstra_length
from navworld.builder import generate_scene
from navworld.genspec import GenerationSpec
from navworld.navgrid import (DIFFICULTY_LEVELS, YAW_STEP, NavError, OccupancyGrid, SamplingFailure,
                              Unreachable, apply_difficulty, build_grid, geodesic_distance, lattice_yaw, level,
                              load_episodes, sample_episode, save_episodes, shortest_path)
from navworld.scene import SceneGraph, Transform, Vec3, default_catalog, normalize_angle
from navworld.skills import load_registry

SCENE_COUNTS = {"building": 10, "tree": 14, "vehicle": 6, "street_furniture": 10, "prop": 6}


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    d = tmp_path_factory.mktemp("skills")
    scene, _, _ = generate_scene(GenerationSpec("residential", SCENE_COUNTS, seed=1), index=load_registry(d))
    return scene, build_grid(scene, default_catalog(), half_extent=3000.0)


def free_pair(grid, gen):
    free = np.argwhere(grid.free_mask)
    a, b = free[gen.integers(len(free), size=2)]
    return tuple(map(int, a)), tuple(map(int, b))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=150, deadline=None)
def test_astar_equals_dijkstra(seed):
    gen = np.random.default_rng(seed)
    grid = random_grid(gen, 20, 20)
    if grid.free_count < 2:
        return
    a, b = free_pair(grid, gen)
    want = dijkstra_length(grid.occ.tolist(), a, b)
    if math.isinf(want):
        with pytest.raises(Unreachable):
            shortest_path(grid, a, b)
        return
    path, length = shortest_path(grid, a, b)
    assert length == want
    assert path[0] == a and path[-1] == b
    assert all(grid.can_step(p, q) for p, q in zip(path, path[1:]))


def test_distance_field_matches_astar():
    gen = np.random.default_rng(5)
    grid = random_grid(gen, 30, 30, 0.25)
    a, _ = free_pair(grid, gen)
    field = grid.distance_field(a)
    for _ in range(40):
        _, b = free_pair(grid, gen)
        want = dijkstra_length(grid.occ.tolist(), a, b)
        assert field[b] == pytest.approx(want, abs=1e-9) if math.isfinite(want) else math.isinf(field[b])


def test_no_corner_cutting():
    occ = np.array([[0, 1], [1, 0]], dtype=bool)
    grid = OccupancyGrid(occ, 25.0, (0, 0))
    assert not grid.can_step((0, 0), (1, 1))
    with pytest.raises(Unreachable):
        shortest_path(grid, (0, 0), (1, 1))
    with pytest.raises(NavError):
        shortest_path(grid, (0, 0), (0, 1))


def test_build_grid_marks_footprints_and_ignores_roads(catalog):
    s = SceneGraph().setup_environment(ground_size=1000)
    s.spawn_actor("crate", "prop_crate_01", Transform(Vec3(0, 0, 40)), catalog)
    s.spawn_actor("road", "road_sidewalk_01", Transform(Vec3(300, 300, 1)), catalog)
    g = build_grid(s, catalog)
    ext = catalog.get("prop_crate_01").base_extent
    r, c = g.cell_of(0, 0)
    assert g.occ[r, c]
    assert not g.occ[g.cell_of(300, 300)] and g.labels[g.cell_of(300, 300)] != 0
    cells = math.ceil(2 * ext.x / 25.0)
    assert g.occ.sum() in (cells * cells, (cells + 1) ** 2)


def test_geodesic_distance_snaps_occupied_goal(city):
    scene, grid = city
    free = np.argwhere(grid.free_mask)
    a = grid.center(*free[0])
    assert geodesic_distance(grid, a, a) == 0.0


@pytest.mark.parametrize("lv", range(8))
def test_level_tagged_episodes_respect_table(city, lv):
    scene, grid = city
    row = level(lv)
    gen = np.random.default_rng(lv)
    for _ in range(3):
        try:
            ep = sample_episode(grid, scene, rng=gen, level_index=lv, max_tries=60)
        except SamplingFailure:
            continue
        lo, hi = row.path_len_range
        assert lo <= ep.L_star <= hi
        bearing = math.degrees(math.atan2(ep.goal_xy[1] - ep.start[1], ep.goal_xy[0] - ep.start[0]))
        assert abs(normalize_angle(ep.start[3] - bearing)) <= row.heading_offset_max + 1e-9
        assert ep.start[3] % YAW_STEP == 0


def test_untagged_episodes_bounds_and_reachability(city):
    scene, grid = city
    gen = np.random.default_rng(0)
    for _ in range(20):
        ep = sample_episode(grid, scene, rng=gen)
        assert 300 <= ep.L_star <= 2000
        a, b = grid.cell_of(*ep.start[:2]), grid.cell_of(*ep.goal_xy)
        assert dijkstra_length(grid.occ.tolist(), a, b) == ep.L_star
        assert ep.d0 == ep.L_star


def test_objectnav_goal_is_next_to_an_instance(city):
    scene, grid = city
    ep = sample_episode(grid, scene, "ObjectNav", rng=3, catalog=default_catalog(), category="tree")
    assert ep.goal["category"] == "tree" and ep.goal["instance"] in scene.actors


def test_sampling_failure_reports_stats():
    grid = OccupancyGrid(np.zeros((4, 4), dtype=bool), 25.0, (0, 0))
    with pytest.raises(SamplingFailure):
        sample_episode(grid, rng=0, max_tries=5)


def test_sampling_is_seed_deterministic(city, tmp_path):
    scene, grid = city
    eps = [sample_episode(grid, scene, rng=s) for s in range(3)]
    assert [e.to_dict() for e in eps] == [sample_episode(grid, scene, rng=s).to_dict() for s in range(3)]
    save_episodes(tmp_path / "e.jsonl", eps)
    assert [e.to_dict() for e in load_episodes(tmp_path / "e.jsonl")] == [e.to_dict() for e in eps]


@pytest.mark.parametrize("lv", [1, 4, 7])
def test_difficulty_density_within_one_cell(city, lv):
    scene, grid = city
    aug = apply_difficulty(scene, grid, lv, 0, default_catalog())
    assert abs(aug.added_cells - aug.target_cells) <= 1
    assert aug.target_cells == round(DIFFICULTY_LEVELS[lv].obstacle_density * grid.free_count)
    assert set(aug.obstacles) <= set(aug.scene.actors)
    assert len(scene) + len(aug.obstacles) == len(aug.scene)


@given(st.integers(0, 2**32 - 1), st.floats(-180, 179.99), st.sampled_from([15.0, 30.0, 90.0, 180.0]))
def test_lattice_yaw_within_offset(seed, bearing, offset):
    yaw = lattice_yaw(np.random.default_rng(seed), bearing, offset)
    assert yaw % YAW_STEP == 0
    assert abs(normalize_angle(yaw - bearing)) <= offset + 1e-9


def test_level_index_validated():
    with pytest.raises(ValueError):
        level(8)
