import math

import numpy as np
import pytest

from edgeseg.mobility import MobilityState, pedestrian_arrays, step_pedestrian, step_vehicle, vehicle_arrays
from edgeseg.model import MobilityParams, ExperimentConfig

AREA = (1000.0, 1000.0)


def test_pedestrian_dt_zero_is_noop():
    st = MobilityState(waypoint=(500, 500), speed=1.5)
    pos, new = step_pedestrian((10.0, 20.0), st, 0.0, AREA, np.random.default_rng(0))
    assert pos == (10.0, 20.0) and new == st


def test_pedestrian_kinematics():
    st = MobilityState(waypoint=(100.0, 0.0), speed=1.0)
    pos, new = step_pedestrian((0.0, 0.0), st, 5.0, AREA, np.random.default_rng(0))
    assert pos == pytest.approx((5.0, 0.0))
    assert new.waypoint == (100.0, 0.0)


def test_pedestrian_arrival_starts_pause_and_new_waypoint():
    st = MobilityState(waypoint=(3.0, 4.0), speed=1.0)
    pos, new = step_pedestrian((0.0, 0.0), st, 10.0, AREA, np.random.default_rng(1), now=0.0)
    assert pos == (3.0, 4.0)
    assert 5.0 <= new.dwell_until <= 35.0
    assert 0 <= new.speed <= 2
    # still paused: no movement
    pos2, _ = step_pedestrian(pos, new, 1.0, AREA, np.random.default_rng(2), now=5.0)
    assert pos2 == pos


def test_pedestrian_random_steps_bounded():
    rng = np.random.default_rng(3)
    n = 100
    pos = rng.uniform(0, 1000, (n, 2))
    wp = rng.uniform(0, 1000, (n, 2))
    sp = rng.uniform(0, 2, n)
    dw = np.zeros(n)
    for t in range(100):  # 10^4 user-steps
        prev = pos.copy()
        u = rng.uniform(size=(4, n))
        pos, wp, sp, dw = pedestrian_arrays(pos, wp, sp, dw, float(t), 1.0, AREA, *u)
        assert np.all((pos >= 0) & (pos <= 1000))
        assert np.all(np.hypot(*(pos - prev).T) <= 2.0 + 1e-9)
        assert np.all((sp >= 0) & (sp <= 2))


def test_vehicle_dt_zero_is_noop():
    st = MobilityState(heading=1.0, speed=12.0)
    pos, new = step_vehicle((5.0, 5.0), st, 0.0, AREA, np.random.default_rng(0))
    assert pos == (5.0, 5.0) and new == st


def test_vehicle_kinematics_without_perturbation():
    st = MobilityState(heading=0.0, speed=10.0)
    pos, _ = step_vehicle((100.0, 100.0), st, 2.0, AREA, np.random.default_rng(0), heading_sd=0.0)
    assert pos == pytest.approx((120.0, 100.0))


def test_vehicle_reflects_off_wall():
    pos, hd = vehicle_arrays([[995.0, 500.0]], [0.0], [10.0], 1.0, AREA, [0.0], heading_sd=0.0)
    assert pos[0] == pytest.approx([995.0, 500.0])
    assert math.cos(hd[0]) == pytest.approx(-1.0)


def test_vehicle_random_steps_bounded():
    rng = np.random.default_rng(4)
    n = 100
    pos = rng.uniform(0, 1000, (n, 2))
    hd = rng.uniform(0, 2 * np.pi, n)
    sp = rng.uniform(8, 20, n)
    for _ in range(100):
        prev = pos.copy()
        pos, hd = vehicle_arrays(pos, hd, sp, 1.0, AREA, rng.standard_normal(n))
        assert np.all((pos >= 0) & (pos <= 1000))
        assert np.all(np.hypot(*(pos - prev).T) <= 20.0 + 1e-9)


def test_default_speed_ranges_straddle_threshold():
    cfg = ExperimentConfig()
    mob = cfg.mobility
    assert mob.pedestrian_speed_mps[1] <= cfg.speed_threshold_mps < mob.vehicle_speed_mps[0]


def test_deterministic_given_seed():
    st = MobilityState(waypoint=(1.0, 1.0), speed=2.0)
    a = step_pedestrian((0.0, 0.0), st, 3.0, AREA, np.random.default_rng(7))
    b = step_pedestrian((0.0, 0.0), st, 3.0, AREA, np.random.default_rng(7))
    assert a == b
