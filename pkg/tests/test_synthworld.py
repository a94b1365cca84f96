import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftcloud.errors import ConfigError, OutOfTrack, ParseError
from shiftcloud.geometry import CameraIntrinsics, compose, lateral_shift, relative_transform
from shiftcloud.pipeline import builtin_track
from shiftcloud.synthworld import (
    Arc,
    Centerline,
    DepthNoiseModel,
    PoseNoiseModel,
    Straight,
    TrackSpec,
    camera_pose,
    corrupt_depth,
    ground_truth_offset,
    parse_track,
    perturb,
    planar,
    render,
    sample_reference,
)
from shiftcloud.synthworld.track import format_track


def test_straight_then_right_turn():
    line = Centerline(TrackSpec(segments=(Straight(10.0), Arc(20.0, math.pi / 2))))
    assert line.point(10.0) == pytest.approx((10.0, 0.0, 0.0))
    # right turn with +Y to the right: center at (10, 20), ends at (30, 20) heading +Y
    x, y, h = line.point(10.0 + 10 * math.pi)
    assert (x, y, h) == pytest.approx((30.0, 20.0, math.pi / 2), abs=1e-9)
    with pytest.raises(OutOfTrack):
        line.point(line.length + 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(15, 80), st.floats(-2.5, 2.5).filter(lambda a: abs(a) > 0.05), st.floats(0, 1), st.floats(-1.6, 1.6))
def test_coords_invert_point(radius, angle, frac, d):
    track = TrackSpec(segments=(Straight(5.0), Arc(radius, angle), Straight(5.0)))
    line = Centerline(track)
    s = frac * line.length
    x, y, h = line.point(s)
    px, py = x - d * math.sin(h), y + d * math.cos(h)  # d to the right
    s2, d2, ok = line.coords(px, py)
    assert ok and float(d2) == pytest.approx(d, abs=1e-9)
    assert float(s2) == pytest.approx(s, abs=1e-7)


def test_camera_pose_axes():
    p = camera_pose(1.0, 2.0, 0.0, 1.5)
    assert np.allclose(p.rotation, [[0, 0, 1], [1, 0, 0], [0, 1, 0]])
    assert np.allclose(p.translation, [1, 2, -1.5])
    assert planar(p) == pytest.approx((1.0, 2.0, 0.0))


def test_ground_truth_offset_of_shifted_pose():
    track = builtin_track("town")
    for p in sample_reference(track, 7.0)[::3]:
        assert ground_truth_offset(track, compose(p, lateral_shift(1.2))) == pytest.approx(1.2, abs=1e-9)


def test_sample_reference_spacing():
    poses = sample_reference(TrackSpec(segments=(Straight(10.0), Arc(30.0, 0.5))), 1.0)
    assert len(poses) == 26
    steps = [np.linalg.norm(relative_transform(a, b).translation) for a, b in zip(poses, poses[1:])]
    assert max(steps) <= 1.0 + 1e-12 and min(steps) > 0.99


def test_track_validation():
    with pytest.raises(ConfigError):
        TrackSpec(segments=())
    with pytest.raises(ConfigError):
        TrackSpec(segments=(Arc(3.0, 1.0),))
    with pytest.raises(ConfigError):
        Straight(-1.0)


def test_parse_errors_report_line():
    bad = "lane_width = 3.5\n[segments]\nstraight 10\nspiral 4\n"
    with pytest.raises(ParseError) as e:
        parse_track(bad, "t.track")
    assert e.value.line == 4 and "t.track:4" in str(e.value)
    with pytest.raises(ParseError) as e:
        parse_track("colour = red\n")
    assert e.value.line == 1
    with pytest.raises(ParseError):
        parse_track("[segments]\n")
    with pytest.raises(ParseError):
        parse_track("[roads]\n")


def test_format_parse_round_trip():
    track = builtin_track("heldout_a")
    back = parse_track(format_track(track))
    assert back == track


def test_render_shapes_and_ground_depth():
    track = TrackSpec(segments=(Straight(100.0),), boxes=(), poles=())
    intr = CameraIntrinsics.from_fov(160, 48)
    f = render(track, camera_pose(10.0, 0.0, 0.0, 1.5), intr)
    assert f.depth.values.shape == (48, 160) and f.intensity.shape == (48, 160)
    # flat ground seen by a level camera: depth = f * h / (v - cy) below the horizon
    v = 40
    z = f.depth.values[v, 80]
    assert z == pytest.approx(intr.fy * 1.5 / (v - intr.cy), rel=1e-9)


def test_perturb_zero_noise_is_identity():
    poses = sample_reference(builtin_track("town"), 2.0)[:10]
    out = perturb(poses, PoseNoiseModel(0.0, 0.0))
    assert all(a.allclose(b, 0) for a, b in zip(poses, out))


def test_perturb_drift_grows_like_sqrt_steps():
    poses = sample_reference(TrackSpec(segments=(Straight(40.0),)), 1.0)
    for k in (9, 36):
        errs = []
        for seed in range(1000):
            out = perturb(poses[: k + 1], PoseNoiseModel(0.02, 0.0, seed=seed))
            errs.append(np.sum((out[k].translation - poses[k].translation) ** 2))
        assert math.sqrt(np.mean(errs)) == pytest.approx(0.02 * math.sqrt(k), rel=0.1)


def test_default_drift_over_lookback_is_small():
    poses = sample_reference(builtin_track("town"), 1.0)[:9]
    drift = [np.linalg.norm(perturb(poses, PoseNoiseModel(seed=s))[8].translation - poses[8].translation)
             for s in range(200)]
    assert 0 < np.mean(drift) < 0.1
    rot = perturb(poses, PoseNoiseModel(seed=1))[8].rotation
    assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-12)


def test_ground_truth_offset_on_arc():
    track = TrackSpec(segments=(Arc(30.0, math.pi / 2),))
    # right turn from the origin heading +X: circle center (0, 30)
    for px, py in [(5.0, 1.0), (20.0, 8.0), (28.0, 25.0)]:
        p = camera_pose(px, py, 0.0, 1.5)
        want = 30.0 - math.hypot(px, py - 30.0)  # inside the curve is to the right
        assert ground_truth_offset(track, p) == pytest.approx(want, abs=1e-9)
    with pytest.raises(OutOfTrack):
        ground_truth_offset(track, camera_pose(-20.0, 0.0, 0.0, 1.5))


def test_ground_pixels_unproject_onto_ground():
    from shiftcloud.depthcloud import unproject
    from shiftcloud.geometry import transform_points
    from shiftcloud.synthworld.raycast import ASPHALT, GRASS, MARKING

    track = builtin_track("town")
    intr = CameraIntrinsics.from_fov(320, 96)
    x, y, h = Centerline(track).point(40.0)
    pose = camera_pose(x, y, h, track.camera_height)
    f = render(track, pose, intr)
    cloud = unproject(intr, f.depth)
    cls = f.labels.reshape(-1)[cloud.pixel_index] // 100000
    ground = np.isin(cls, [ASPHALT, GRASS, MARKING])
    world = transform_points(pose, cloud.points[ground])
    assert ground.sum() > 1000 and np.max(np.abs(world[:, 2])) < 1e-6


def test_depth_noise():
    d = np.random.default_rng(0).uniform(1, 40, size=(30, 50))
    d[0, :5] = 0.0
    assert np.array_equal(corrupt_depth(d, DepthNoiseModel(), 1), d)
    noisy = corrupt_depth(d, DepthNoiseModel(0.03, 0.05), 1)
    assert np.all(noisy[0, :5] == 0) and np.all(noisy[d > 0] > 0)
    assert np.array_equal(noisy, corrupt_depth(d, DepthNoiseModel(0.03, 0.05), 1))
    # pure scale error keeps depth ratios
    s = corrupt_depth(d, DepthNoiseModel(0.1, 0.0), 2)
    ratio = s[d > 0] / d[d > 0]
    assert np.ptp(ratio) < 1e-12 and ratio[0] != 1.0
    with pytest.raises(ConfigError):
        DepthNoiseModel(-0.1)
