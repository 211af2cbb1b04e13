import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navworld.scene import (ActorRecord, Catalog, DuplicateNameError, InvalidTransformError, PatternError,
                            Rotation, SceneGraph, SetupError, Transform, UnknownActorError, UnknownAssetError,
                            Vec3, default_catalog, normalize_angle, world_aabb)

finite = st.floats(-1e4, 1e4, allow_nan=False)


def corner_aabb(actor, catalog):
    """Oracle: rotate all eight corners of the scaled box and take coordinate extremes."""
    base = catalog.get(actor.asset_id).base_extent
    t = actor.transform
    ex, ey, ez = base.x * t.scale.x, base.y * t.scale.y, base.z * t.scale.z
    a = math.radians(t.rotation.yaw)
    pts = []
    for sx, sy, sz in itertools.product((-1, 1), repeat=3):
        x, y = sx * ex, sy * ey
        pts.append((x * math.cos(a) - y * math.sin(a) + t.location.x,
                    x * math.sin(a) + y * math.cos(a) + t.location.y, sz * ez + t.location.z))
    pts = np.array(pts)
    return pts.min(axis=0), pts.max(axis=0)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_normalize_angle_range_and_congruence(deg):
    out = normalize_angle(deg)
    assert -180.0 <= out < 180.0
    assert math.isclose(math.remainder(out - deg, 360.0), 0.0, abs_tol=1e-6)


@given(finite, finite, finite, st.floats(-720, 720), st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.1, 5))
@settings(max_examples=200)
def test_world_aabb_matches_corner_oracle(x, y, z, yaw, sx, sy, sz):
    cat = default_catalog()
    asset = cat.list_assets()[0]
    rec = ActorRecord("a", asset.asset_id, asset.category, Transform(Vec3(x, y, z), Rotation(yaw), Vec3(sx, sy, sz)))
    box = world_aabb(rec, cat)
    lo, hi = corner_aabb(rec, cat)
    np.testing.assert_allclose(box.min.as_list(), lo, atol=1e-6)
    np.testing.assert_allclose(box.max.as_list(), hi, atol=1e-6)


def test_spawn_requires_setup(catalog):
    with pytest.raises(SetupError):
        SceneGraph().spawn_actor("a", catalog.list_assets()[0].asset_id, Transform(), catalog)


def test_setup_twice_needs_reinitialize():
    s = SceneGraph().setup_environment()
    with pytest.raises(SetupError):
        s.setup_environment()
    s.setup_environment(ground_size=1000, reinitialize=True)
    assert s.ground_half_extent == 500


def test_actor_lifecycle_and_errors(catalog):
    s = SceneGraph().setup_environment()
    aid = catalog.list_assets("tree")[0].asset_id
    s.spawn_actor("tree_1", aid, Transform(), catalog)
    s.spawn_actor("tree_2", aid, Transform(), catalog, spawned_in_session=False)
    with pytest.raises(DuplicateNameError):
        s.spawn_actor("tree_1", aid, Transform(), catalog)
    with pytest.raises(UnknownAssetError):
        s.spawn_actor("x", "no_such_asset", Transform(), catalog)
    with pytest.raises(UnknownActorError):
        s.delete_actor("nope")
    assert [a.name for a in s.find_actors_by_name("tree_?")] == ["tree_1", "tree_2"]
    with pytest.raises(PatternError):
        s.find_actors_by_name("tree_[12]")
    assert s.delete_all_spawned() == ["tree_1"]
    assert list(s.actors) == ["tree_2"]


def test_transform_validation():
    with pytest.raises(InvalidTransformError):
        Vec3(float("nan"), 0, 0)
    with pytest.raises(InvalidTransformError):
        Transform(scale=Vec3(1, 0, 1))
    assert Rotation(540.0).yaw == -180.0


def test_scene_json_roundtrip_is_byte_stable(catalog, rng):
    from conftest import random_scene

    s = random_scene(rng, 25)
    text = s.to_json()
    again = SceneGraph.from_json(text)
    assert again.to_json() == text
    assert again.digest() == s.digest()
    assert json.loads(text)["actors"] == sorted(json.loads(text)["actors"], key=lambda a: a["name"])


def test_catalog_roundtrip(catalog):
    assert Catalog.from_json(catalog.to_json()).to_json() == catalog.to_json()
    assert len(catalog) >= 50
    assert set(catalog.categories()) >= {"building", "tree", "vehicle", "prop", "street_furniture", "road"}
