import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftcloud.errors import ConfigError
from shiftcloud.labeling import SteeringParams
from shiftcloud.model import PointNetLite
from shiftcloud.pipeline import builtin_track
from shiftcloud.simulator import (
    REPORT_FIELDS,
    EpisodeConfig,
    Job,
    ModelController,
    OracleController,
    SimConfig,
    VehicleState,
    ZeroController,
    bev_svg,
    collides,
    format_csv,
    on_lane,
    perturb_steering,
    report_rows,
    run_episode,
    start_state,
    step,
    summarize,
    sweep,
)
from shiftcloud.synthworld import Arc, Box, Straight, TrackSpec

STRAIGHT = TrackSpec(segments=(Straight(300.0),), name="straight")


def test_step_straight_and_circle():
    s = VehicleState(0.0, 0.0, 0.0, speed=10.0)
    s1 = step(s, 0.0, 0.1)
    assert (s1.x, s1.y, s1.heading) == (1.0, 0.0, 0.0)
    # constant steer traces a circle of radius L / tan(steer)
    steer, dt = 0.1, 0.002
    r = s.wheelbase / math.tan(steer)
    for _ in range(1000):
        s = step(s, steer, dt)
    assert math.hypot(s.x, s.y - r) == pytest.approx(r, rel=1e-3)
    assert s.y > 0  # positive steer turns right (+Y)
    with pytest.raises(ConfigError):
        step(s, math.pi / 2, 0.1)
    assert step(s, 0.3, 0.0) == s


def test_on_lane_boundaries():
    # car is 1.8 wide, lane 3.5: on lane while |d| <= 0.85
    assert on_lane(STRAIGHT, start_state(STRAIGHT, 50, 10.0, lateral=0.8))
    assert not on_lane(STRAIGHT, start_state(STRAIGHT, 50, 10.0, lateral=-0.9))
    assert not on_lane(STRAIGHT, start_state(STRAIGHT, 50, 10.0, yaw=0.5))


def test_collisions():
    assert not collides(STRAIGHT, start_state(STRAIGHT, 50, 10.0))
    assert collides(STRAIGHT, start_state(STRAIGHT, 50, 10.0, lateral=STRAIGHT.right_barrier - 0.5))
    boxed = TrackSpec(segments=(Straight(300.0),), boxes=(Box(52.0, 0.0, 4.2, 1.8, 1.5),))
    assert collides(boxed, start_state(boxed, 50, 10.0))
    assert not collides(boxed, start_state(boxed, 20, 10.0))


def test_start_state_offsets():
    track = TrackSpec(segments=(Arc(30.0, math.pi),))
    s = start_state(track, 0, 10.0, lateral=1.0, yaw=0.1)
    assert (s.x, s.y, s.heading) == pytest.approx((0.0, 1.0, 0.1))


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0, 0.3), st.integers(0, 2**31 - 1))
def test_perturbation_bounded(steer, level, seed):
    out = perturb_steering(steer, level, np.random.default_rng(seed), 0.5)
    assert abs(out - steer) <= level * 0.5


def test_perturbation_zero_is_identity_and_negative_rejected():
    assert perturb_steering(0.3, 0.0, np.random.default_rng(0)) == 0.3
    with pytest.raises(ConfigError):
        perturb_steering(0.3, -0.1, np.random.default_rng(0))


def test_zero_controller_on_straight():
    r = run_episode(STRAIGHT, ZeroController(), EpisodeConfig(10, 50))
    assert r.ratio_on_lane == 1.0 and r.termination == "completed" and len(r.on_lane) == 50


def test_zero_controller_leaves_curved_lane():
    track = TrackSpec(segments=(Straight(20.0), Arc(25.0, math.pi), Straight(50.0)))
    r = run_episode(track, ZeroController(), EpisodeConfig(0, 80))
    assert r.ratio_on_lane < 0.7


@pytest.mark.parametrize("name", ["heldout_a", "heldout_b"])
def test_oracle_keeps_lane(name):
    track = builtin_track(name)
    oracle = OracleController(track, SteeringParams(0.3, 5.0))
    for s0 in (5, 80):
        r = run_episode(track, oracle, EpisodeConfig(s0, 135))
        assert r.ratio_on_lane == 1.0 and not r.terminated_early


def test_oracle_recovers_from_offset_start():
    track = builtin_track("heldout_a")
    r = run_episode(track, OracleController(track, SteeringParams(0.3, 5.0)), EpisodeConfig(5, 135, lateral=0.8, yaw=0.1))
    assert r.on_lane[-60:].all()


def test_episode_deterministic_with_model():
    net = PointNetLite((3, 8), (8, 4, 1), seed=0)
    ctl = ModelController(net, SteeringParams(0.3))
    sim = SimConfig(points=32)
    a = run_episode(STRAIGHT, ctl, EpisodeConfig(10, 8, perturbation=0.1, seed=3), sim)
    b = run_episode(STRAIGHT, ctl, EpisodeConfig(10, 8, perturbation=0.1, seed=3), sim)
    assert a.path == b.path and a.steering == b.steering


def test_sweep_report_and_summary():
    ctl = {"zero": ZeroController()}
    jobs = [Job("zero", STRAIGHT, s, p, 0, frames=20) for s in (0, 50) for p in (0.0, 0.1)]
    res = sweep(jobs, ctl, SimConfig())
    rows = report_rows(jobs, res)
    text = format_csv(rows, REPORT_FIELDS)
    assert text.splitlines()[0] == ",".join(REPORT_FIELDS)
    assert len(text.splitlines()) == 5
    summ = summarize(rows)
    assert set(summ) == {("zero", 0.0), ("zero", 0.1)}
    with pytest.raises(ConfigError):
        sweep([], ctl, SimConfig())


def test_bev_svg():
    r = run_episode(STRAIGHT, ZeroController(), EpisodeConfig(0, 10))
    svg = bev_svg(STRAIGHT, r, "zero")
    assert svg.startswith("<svg") and "polyline" in svg


def test_on_lane_single_corner_and_other_lane():
    assert not on_lane(STRAIGHT, start_state(STRAIGHT, 50, 10.0, lateral=-STRAIGHT.lane_width))
    # tiny yaw at the edge: only the front-right corner crosses
    s = start_state(STRAIGHT, 50, 10.0, lateral=0.84, yaw=0.005)
    from shiftcloud.synthworld import Centerline

    _, d, _ = Centerline(STRAIGHT).coords(*s.corners().T)
    assert (np.abs(d) > STRAIGHT.lane_width / 2).sum() == 1
    assert not on_lane(STRAIGHT, s)


def test_collision_ends_episode_rest_off_lane():
    boxed = TrackSpec(segments=(Straight(300.0),), boxes=(Box(40.0, 0.0, 4.2, 1.8, 1.5),))
    r = run_episode(boxed, ZeroController(), EpisodeConfig(10, 60))
    assert r.termination == "collision" and r.terminated_early
    assert len(r.on_lane) == 60 and not r.on_lane[len(r.path):].any()
    assert r.ratio_on_lane == pytest.approx(np.mean(r.on_lane))


def test_perturbation_mean_zero():
    rng = np.random.default_rng(0)
    u = np.array([perturb_steering(0.0, 0.1, rng, 0.5) for _ in range(100_000)])
    sigma = 0.05 / math.sqrt(3)
    assert abs(u.mean()) < 3 * sigma / math.sqrt(len(u))
    assert np.abs(u).max() <= 0.05
