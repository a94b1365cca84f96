import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftcloud.augmentation import FrameRecord, Trajectory, frame_tag
from shiftcloud.errors import ConfigError, EndOfTrajectory
from shiftcloud.geometry import PointCloud, RigidTransform, compose, lateral_shift, random_transform
from shiftcloud.labeling import (
    LabelConfig,
    SteeringParams,
    build_dataset,
    lateral_offset,
    select_future_frame,
    steering_from_offset,
)
from shiftcloud.synthworld import Arc, Centerline, Straight, TrackSpec, sample_reference

OFFSETS = tuple(np.linspace(-2.0, 2.0, 10))


def planar_offset(line, s_i, s_j, shift_i=0.0):
    """Lateral position of centerline point s_j seen from a camera at s_i
    displaced shift_i to the right, using only 2D track geometry."""
    xi, yi, hi = line.point(s_i)
    xj, yj, _ = line.point(s_j)
    rx, ry = -math.sin(hi), math.cos(hi)  # right-hand normal of travel
    xi, yi = xi + shift_i * rx, yi + shift_i * ry
    return (xj - xi) * rx + (yj - yi) * ry


def _record(i, pose, offset=0.0):
    pts = np.array([[0.0, 1.0, 5.0 + i % 3], [1.0, 1.0, 6.0]])
    return FrameRecord(i, pose, PointCloud(pts, frame_tag(i, offset)), float(i), offset)


def _trajectories(track, offsets=OFFSETS, spacing=1.0):
    poses = sample_reference(track, spacing)
    out = [Trajectory(0.0, [_record(i, p) for i, p in enumerate(poses)])]
    for o in offsets:
        out.append(Trajectory(o, [_record(i, compose(p, lateral_shift(o)), o) for i, p in enumerate(poses)]))
    return poses, out


def test_future_frame_examples():
    poses = sample_reference(TrackSpec(segments=(Straight(30.0),)), 1.0)
    assert select_future_frame(poses, 3, 5.0) == 8
    assert select_future_frame(poses, 3, 0.5) == 4
    with pytest.raises(EndOfTrajectory):
        select_future_frame(poses, len(poses) - 1, 5.0)
    with pytest.raises(ConfigError):
        select_future_frame(poses, 0, 0.0)


def test_lateral_offset_examples():
    rng = np.random.default_rng(0)
    p = random_transform(rng)
    assert lateral_offset(p, compose(p, lateral_shift(0.7))) == pytest.approx(0.7, abs=1e-12)
    ahead = compose(p, RigidTransform(np.eye(3), [0, 0, 3.0]))
    assert abs(lateral_offset(p, ahead)) < 1e-12


@pytest.mark.parametrize("radius,sign", [(25.0, 1), (40.0, -1)])
def test_lateral_offset_on_circle(radius, sign):
    track = TrackSpec(segments=(Arc(radius, sign * math.pi / 2),))
    line = Centerline(track)
    for s in (1.0, 5.0, 12.5, 30.0):
        xi, yi, hi = line.point(0.0)
        from shiftcloud.synthworld import camera_pose

        pi = camera_pose(xi, yi, hi, 1.5)
        xj, yj, hj = line.point(s)
        pj = camera_pose(xj, yj, hj, 1.5)
        want = sign * radius * (1 - math.cos(s / radius))
        assert lateral_offset(pi, pj) == pytest.approx(want, abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-10, 10, allow_nan=False))
def test_lateral_offset_of_shift(seed, x):
    p = random_transform(np.random.default_rng(seed))
    assert abs(lateral_offset(p, compose(p, lateral_shift(x))) - x) < 1e-12


def test_steering_examples():
    p1 = SteeringParams(alpha=1.0)
    assert steering_from_offset(0.0, p1) == 0.0
    assert steering_from_offset(1.0, p1) == pytest.approx(math.pi / 4, abs=1e-15)
    arr = steering_from_offset(np.array([-1.0, 0.0, 1.0]), p1)
    assert arr.tolist() == [-math.pi / 4, 0.0, math.pi / 4]


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1e-3, 50))
def test_steering_odd_and_bounded(dx, alpha):
    p = SteeringParams(alpha=alpha)
    d = steering_from_offset(dx, p)
    assert steering_from_offset(-dx, p) == -d
    assert abs(d) <= math.pi / 2


@settings(max_examples=200, deadline=None)
@given(st.floats(-100, 100, allow_nan=False), st.floats(1e-6, 10), st.floats(0.01, 5))
def test_steering_strictly_increasing(dx, step, alpha):
    p = SteeringParams(alpha=alpha)
    assert steering_from_offset(dx + step, p) > steering_from_offset(dx, p)


def test_steering_params_validated():
    with pytest.raises(ConfigError):
        SteeringParams(alpha=0.0)
    with pytest.raises(ConfigError):
        SteeringParams(lookahead=-1.0)


def test_straight_labels_are_corrective():
    _, trajs = _trajectories(TrackSpec(segments=(Straight(40.0),)))
    samples, stats = build_dataset(trajs, LabelConfig(), points=8)
    assert samples
    for s in samples:
        off, _ = s.source
        assert abs(s.delta_x + off) < 1e-6
        if off:
            assert math.copysign(1, s.delta_x) == -math.copysign(1, off)
    assert stats.counts[0.0] == stats.counts[OFFSETS[0]]


def test_labels_match_track_geometry_on_curves():
    track = TrackSpec(segments=(Straight(10.0), Arc(20.0, math.pi / 2), Straight(10.0), Arc(15.0, -math.pi / 3)))
    line = Centerline(track)
    _, trajs = _trajectories(track)
    samples, _ = build_dataset(trajs, LabelConfig(clamp=100.0), points=4)
    for s in samples:
        off, fid = s.source
        want = planar_offset(line, float(fid), float(s.future_id), off)
        assert s.delta_x == pytest.approx(want, abs=1e-6)


def test_future_frame_is_reference_lookahead():
    track = TrackSpec(segments=(Arc(20.0, math.pi / 2),))
    poses, trajs = _trajectories(track, offsets=(2.0,))
    samples, _ = build_dataset(trajs, LabelConfig(clamp=100.0), points=4)
    for s in samples:
        assert s.future_id == select_future_frame(poses, s.source[1], 5.0)
        # brute force pose chain: T_C^-1 T_ref(j)
        c = compose(poses[s.source[1]], lateral_shift(s.source[0]))
        rel = np.linalg.inv(c.matrix) @ poses[s.future_id].matrix
        assert s.delta_x == pytest.approx(rel[0, 3], abs=1e-9)


def test_clamp_and_flag_exclusion(caplog):
    poses, trajs = _trajectories(TrackSpec(segments=(Straight(30.0),)), offsets=(-2.0, 2.0))
    trajs[1].frames[3] = FrameRecord(3, trajs[1].frames[3].pose, trajs[1].frames[3].cloud, 3.0, -2.0, flagged=True)
    samples, stats = build_dataset(trajs, LabelConfig(clamp=1.5), points=4)
    assert max(abs(s.delta_x) for s in samples) == 1.5
    assert stats.clamped > 0 and stats.flagged[-2.0] == 1
    assert "clamped" in caplog.text
    kept, _ = build_dataset(trajs, LabelConfig(clamp=1.5, exclude_flagged=False), points=4)
    assert len(kept) == len(samples) + 1


def test_reference_required():
    _, trajs = _trajectories(TrackSpec(segments=(Straight(20.0),)), offsets=(1.0,))
    with pytest.raises(ConfigError):
        build_dataset(trajs[1:], LabelConfig(), points=4)


def test_dataset_deterministic():
    _, trajs = _trajectories(TrackSpec(segments=(Straight(20.0),)), offsets=(1.0,))
    a, _ = build_dataset(trajs, LabelConfig(seed=3), points=5)
    b, _ = build_dataset(trajs, LabelConfig(seed=3), points=5)
    assert all(np.array_equal(x.cloud.points, y.cloud.points) and x.delta_x == y.delta_x for x, y in zip(a, b))
