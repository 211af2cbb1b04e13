import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from navworld.env import (Action, EnvConfig, EnvError, NavEnv, bearing_to, compute_reward, ego_raster, rollout)
from navworld.navgrid import Episode, OccupancyGrid, sample_episode
from navworld.raster import GRAY_LEVELS


def open_grid(n=40, walls=()):
    occ = np.zeros((n, n), dtype=bool)
    for r, c in walls:
        occ[r, c] = True
    return OccupancyGrid(occ, 25.0, (0.0, 0.0))


def episode(start, goal, yaw=0.0, L=None):
    d = L if L is not None else math.dist(start, goal)
    return Episode("e", "", "PointNav", [start[0], start[1], 0.0, yaw], {"position": list(goal)},
                   [list(start), list(goal)], d, d)


def test_forward_moves_one_step_along_yaw():
    env = NavEnv(open_grid())
    env.reset(episode((512.5, 512.5), (912.5, 512.5)))
    env.step(Action.MoveForward)
    assert (env.x, env.y) == pytest.approx((537.5, 512.5))
    env.step(Action.TurnRight)
    assert env.yaw == 15.0
    env.step("TurnLeft")
    env.step(Action.TurnLeft)
    assert env.yaw == -15.0


def test_blocked_move_keeps_pose_and_flags_collision():
    g = open_grid(walls=[(20, 21)])
    env = NavEnv(g)
    env.reset(episode(g.center(20, 20), g.center(20, 30)))
    res = env.step(Action.MoveForward)
    assert res.info["collision"] and (env.x, env.y) == g.center(20, 20)
    assert env.collisions == [(0, (20, 21))]


def test_reward_and_success_on_stop():
    g = open_grid()
    env = NavEnv(g)
    ep = episode(g.center(20, 20), g.center(20, 22))
    env.reset(ep)
    r = env.step(Action.MoveForward).reward
    assert r == pytest.approx(25.0 / ep.d0 - 0.01)
    res = env.step(Action.Stop)
    assert res.terminated and res.info["success"]
    assert res.reward == pytest.approx(1.0 - 0.01)
    with pytest.raises(EnvError):
        env.step(Action.Stop)


def test_reward_formula():
    assert compute_reward(500, 400, 1000, False) == pytest.approx(0.1 - 0.01)
    assert compute_reward(50, 50, 1000, True) == pytest.approx(0.99)
    with pytest.raises(ValueError):
        compute_reward(1, 1, 0, False)


def test_truncation_at_step_budget():
    g = open_grid()
    env = NavEnv(g, EnvConfig(max_steps=3))
    env.reset(episode(g.center(5, 5), g.center(30, 30)))
    flags = [env.step(Action.TurnLeft).truncated for _ in range(3)]
    assert flags == [False, False, True] and env.done and not env.success


def test_stop_far_from_goal_fails():
    g = open_grid()
    env = NavEnv(g)
    env.reset(episode(g.center(5, 5), g.center(30, 30)))
    res = env.step(Action.Stop)
    assert res.terminated and not res.info["success"]


def test_start_on_obstacle_rejected():
    g = open_grid(walls=[(5, 5)])
    with pytest.raises(EnvError):
        NavEnv(g).reset(episode(g.center(5, 5), g.center(9, 9)))


@given(st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(-180, 180))
def test_bearing_sign_matches_turn_direction(gx, gy, yaw):
    if math.hypot(gx, gy) < 1e-3:
        return
    b = bearing_to(0.0, 0.0, yaw, gx, gy)
    assert -180 <= b < 180
    # turning right (yaw + 15) reduces a positive bearing
    if 20 < b < 170:
        assert abs(bearing_to(0, 0, yaw + 15, gx, gy)) < abs(b)


def test_distance_is_geodesic():
    walls = [(r, 21) for r in range(0, 35)]
    g = open_grid(walls=walls)
    env = NavEnv(g)
    obs = env.reset(episode(g.center(10, 19), g.center(10, 23)))
    assert obs.distance * 100 > 4 * 25 + 100  # must walk around the wall


def test_ego_raster_is_heading_up():
    g = open_grid(walls=[(20, 24)])
    x, y = g.center(20, 20)
    img = ego_raster(g, x, y, 0.0, 64)
    assert img.shape == (64, 64) and img.dtype == np.uint8
    # the obstacle 4 cells ahead appears above the centre row
    hits = np.argwhere(img == GRAY_LEVELS["prop"])
    assert hits.size and hits[:, 0].max() < 32 and set(hits[:, 1]) <= {31, 32}


def replay_digest(grid, ep, actions, cfg=EnvConfig(max_steps=200)):
    env = NavEnv(grid, cfg)
    env.reset(ep, seed=7)
    for a in actions:
        if env.done:
            break
        env.step(a)
    return env.log_digest()


def test_replays_are_identical():
    gen = np.random.default_rng(0)
    occ = gen.random((40, 40)) < 0.15
    g = OccupancyGrid(occ, 25.0, (0.0, 0.0))
    ep = sample_episode(g, rng=1, bounds=(300, 700))
    actions = [Action(int(a)) for a in gen.integers(0, 3, 150)]
    assert len({replay_digest(g, ep, actions) for _ in range(5)}) == 1


def test_rollout_records_features_and_cells():
    g = open_grid()

    class Forward:
        def act(self, obs):
            return Action.Stop if obs.distance < 1.0 else Action.MoveForward

    ep = episode(g.center(20, 10), g.center(20, 20))
    r = rollout(NavEnv(g), Forward(), ep)
    assert r.success and r.stopped and r.actions[-1] == "Stop"
    assert len(r.cells) == len(r.actions) + 1 == len(r.features) + 1
    assert r.record.executed_length == pytest.approx(25.0 * (len(r.actions) - 1))
