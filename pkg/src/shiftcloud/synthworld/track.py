"""Track centerlines built from straight and circular-arc segments.

World frame: X, Y span the ground plane, Z points down (ground at Z = 0,
cameras at Z = -camera_height). Headings are measured from +X toward +Y,
which seen from above is clockwise: a positive arc angle is a right turn.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError, OutOfTrack, ParseError
from ..geometry import RigidTransform

ARC_TOL = 1e-9


@dataclass(frozen=True)
class Straight:
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigError("straight segment length must be positive")


@dataclass(frozen=True)
class Arc:
    radius: float
    angle: float  # radians; positive turns right

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError("arc radius must be positive")
        if self.angle == 0 or abs(self.angle) > 2 * math.pi + 1e-12:
            raise ConfigError("arc angle must be non-zero and at most one full turn")

    @property
    def length(self) -> float:
        return self.radius * abs(self.angle)

    @property
    def curvature(self) -> float:
        return math.copysign(1.0 / self.radius, self.angle)


@dataclass(frozen=True)
class Box:
    """Upright box standing on the ground; ``yaw`` in radians."""

    cx: float
    cy: float
    length: float
    width: float
    height: float
    yaw: float = 0.0


@dataclass(frozen=True)
class Pole:
    x: float
    y: float
    radius: float = 0.1
    height: float = 3.0


@dataclass(frozen=True)
class TrackSpec:
    segments: tuple
    lane_width: float = 3.5
    camera_height: float = 1.5
    start: tuple = (0.0, 0.0, 0.0)  # x, y, heading (radians)
    name: str = "track"
    marking_width: float = 0.15
    dash_length: float = 3.0
    dash_gap: float = 6.0
    shoulder: float = 0.75
    barrier_gap: float = 1.5
    barrier_height: float = 0.8
    pole_spacing: float = 15.0
    pole_gap: float = 2.5
    pole_radius: float = 0.12
    pole_height: float = 3.0
    boxes: tuple = ()
    poles: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "poles", tuple(self.poles))
        if not self.segments:
            raise ConfigError("track has no segments")
        if not self.lane_width > 0:
            raise ConfigError("lane_width must be positive")
        if not self.camera_height > 0:
            raise ConfigError("camera_height must be positive")
        reach = max(self.lane_width, self.right_barrier, -self.left_barrier, self.pole_offset)
        for seg in self.segments:
            if isinstance(seg, Arc) and seg.radius <= reach:
                raise ConfigError(
                    f"arc radius {seg.radius} must exceed the lane width and feature offsets ({reach})"
                )

    # lateral layout: ego lane centered on d = 0, oncoming lane on the left
    @property
    def right_edge(self) -> float:
        return self.lane_width / 2

    @property
    def left_edge(self) -> float:
        return -1.5 * self.lane_width

    @property
    def right_barrier(self) -> float:
        return self.right_edge + self.barrier_gap

    @property
    def left_barrier(self) -> float:
        return self.left_edge - self.barrier_gap

    @property
    def pole_offset(self) -> float:
        return self.right_edge + self.pole_gap

    @property
    def marking_offsets(self) -> tuple[float, float, float]:
        return (self.left_edge, -self.lane_width / 2, self.right_edge)

    @property
    def length(self) -> float:
        return sum(s.length for s in self.segments)


@dataclass(frozen=True)
class _Placed:
    seg: object
    s0: float
    x0: float
    y0: float
    h0: float


class Centerline:
    """Arc-length parameterized centerline of a track."""

    def __init__(self, track: TrackSpec):
        self.track = track
        x, y, h = (float(v) for v in track.start)
        s = 0.0
        placed = []
        for seg in track.segments:
            placed.append(_Placed(seg, s, x, y, h))
            x, y, h = self._advance(seg, x, y, h, seg.length)
            s += seg.length
        self.placed = placed
        self.length = s
        self.end = (x, y, h)

    @staticmethod
    def _advance(seg, x, y, h, u):
        if isinstance(seg, Straight):
            return x + u * math.cos(h), y + u * math.sin(h), h
        k = seg.curvature
        h1 = h + k * u
        return x + (math.sin(h1) - math.sin(h)) / k, y + (math.cos(h) - math.cos(h1)) / k, h1

    def point(self, s: float) -> tuple[float, float, float]:
        """(x, y, heading) at arc length ``s``."""
        if s < -ARC_TOL or s > self.length + ARC_TOL:
            raise OutOfTrack(f"arc length {s} outside [0, {self.length}]")
        s = min(max(s, 0.0), self.length)
        for p in reversed(self.placed):
            if s >= p.s0 or p is self.placed[0]:
                return self._advance(p.seg, p.x0, p.y0, p.h0, s - p.s0)
        raise AssertionError("unreachable")

    def coords(self, x, y):
        """Track coordinates of ground-plane points.

        Returns ``(s, d, valid)``: arc length of the closest centerline foot
        point, signed lateral offset (positive = right of the centerline), and
        whether any segment covers the point. Among covering segments the one
        with the smallest ``|d|`` wins.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        best_s = np.zeros(np.broadcast(x, y).shape)
        best_d = np.full(best_s.shape, np.inf)
        for p in self.placed:
            s, d, ok = self._segment_coords(p, x, y)
            better = ok & (np.abs(d) < np.abs(best_d))
            best_s = np.where(better, s, best_s)
            best_d = np.where(better, d, best_d)
        valid = np.isfinite(best_d)
        return best_s, np.where(valid, best_d, np.nan), valid

    @staticmethod
    def _segment_coords(p: _Placed, x, y):
        seg = p.seg
        ch, sh = math.cos(p.h0), math.sin(p.h0)
        if isinstance(seg, Straight):
            dx, dy = x - p.x0, y - p.y0
            u = dx * ch + dy * sh
            d = -dx * sh + dy * ch
            ok = (u >= -ARC_TOL) & (u <= seg.length + ARC_TOL)
            return p.s0 + np.clip(u, 0.0, seg.length), d, ok
        r = 1.0 / seg.curvature  # signed radius
        cx, cy = p.x0 - r * sh, p.y0 + r * ch
        wx, wy = x - cx, y - cy
        dist = np.hypot(wx, wy)
        sgn = math.copysign(1.0, r)
        with np.errstate(invalid="ignore", divide="ignore"):
            nx, ny = -sgn * wx / dist, -sgn * wy / dist
        d = r - sgn * dist
        heading = np.arctan2(-nx, ny)
        mid = p.h0 + seg.angle / 2
        delta = np.mod(heading - mid + math.pi, 2 * math.pi) - math.pi
        u = (mid - p.h0 + delta) / seg.curvature
        ok = (dist > 0) & (u >= -ARC_TOL) & (u <= seg.length + ARC_TOL) & (np.abs(d) < abs(r))
        return p.s0 + np.clip(u, 0.0, seg.length), d, ok

    def heading_at(self, s):
        return np.array([self.point(v)[2] for v in np.atleast_1d(s)])


def camera_pose(x: float, y: float, heading: float, height: float) -> RigidTransform:
    """Level camera at ground position (x, y), looking along ``heading``."""
    c, s = math.cos(heading), math.sin(heading)
    right = [-s, c, 0.0]
    down = [0.0, 0.0, 1.0]
    forward = [c, s, 0.0]
    return RigidTransform(np.column_stack([right, down, forward]), [x, y, -height])


def planar(pose: RigidTransform) -> tuple[float, float, float]:
    """Ground-plane position and heading of a (roughly level) camera pose."""
    f = pose.rotation[:, 2]
    return float(pose.translation[0]), float(pose.translation[1]), math.atan2(f[1], f[0])


def sample_reference(track: TrackSpec, spacing: float) -> list[RigidTransform]:
    if not spacing > 0:
        raise ConfigError("spacing must be positive")
    line = Centerline(track)
    n = int(math.floor(line.length / spacing + 1e-9))
    poses = []
    for k in range(n + 1):
        x, y, h = line.point(min(k * spacing, line.length))
        poses.append(camera_pose(x, y, h, track.camera_height))
    return poses


def ground_truth_offset(track: TrackSpec, pose: RigidTransform, line: Centerline | None = None) -> float:
    line = line or Centerline(track)
    _, d, ok = line.coords(pose.translation[0], pose.translation[1])
    if not bool(ok):
        raise OutOfTrack(f"pose at {pose.translation[:2]} is beyond the track")
    return float(d)


# --- track spec files -------------------------------------------------------

_FLOAT_KEYS = {
    "lane_width", "camera_height", "marking_width", "dash_length", "dash_gap", "shoulder",
    "barrier_gap", "barrier_height", "pole_spacing", "pole_gap", "pole_radius", "pole_height",
}


def parse_track(text: str, path=None) -> TrackSpec:
    """Parse a track spec: ``key = value`` lines, then ``[segments]`` with
    ``straight <length>`` / ``arc <radius> <angle_deg>`` lines, optionally
    ``[boxes]`` (``cx cy length width height [yaw_deg]``) and
    ``[poles]`` (``x y [radius height]``)."""
    kv: dict = {}
    segments, boxes, poles = [], [], []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("segments", "boxes", "poles"):
                raise ParseError(f"unknown section [{section}]", path, lineno)
            continue
        try:
            if section is None:
                if "=" not in line:
                    raise ValueError("expected 'key = value'")
                key, value = (t.strip() for t in line.split("=", 1))
                if key in _FLOAT_KEYS:
                    kv[key] = float(value)
                elif key == "name":
                    kv[key] = value
                elif key == "start":
                    x, y, hdeg = (float(v) for v in value.split())
                    kv["start"] = (x, y, math.radians(hdeg))
                else:
                    raise ValueError(f"unknown key {key!r}")
            elif section == "segments":
                kind, *args = line.split()
                if kind == "straight" and len(args) == 1:
                    segments.append(Straight(float(args[0])))
                elif kind == "arc" and len(args) == 2:
                    segments.append(Arc(float(args[0]), math.radians(float(args[1]))))
                else:
                    raise ValueError(f"bad segment {line!r}")
            elif section == "boxes":
                vals = [float(v) for v in line.split()]
                if len(vals) not in (5, 6):
                    raise ValueError("box needs cx cy length width height [yaw_deg]")
                if len(vals) == 6:
                    vals[5] = math.radians(vals[5])
                boxes.append(Box(*vals))
            elif section == "poles":
                vals = [float(v) for v in line.split()]
                if len(vals) not in (2, 4):
                    raise ValueError("pole needs x y [radius height]")
                poles.append(Pole(*vals))
        except (ValueError, ConfigError) as e:
            raise ParseError(str(e), path, lineno) from None
    try:
        return TrackSpec(segments=tuple(segments), boxes=tuple(boxes), poles=tuple(poles), **kv)
    except ConfigError as e:
        raise ParseError(str(e), path) from None


def load_track(path) -> TrackSpec:
    return parse_track(Path(path).read_text(encoding="ascii"), path)


def format_track(track: TrackSpec) -> str:
    out = [f"name = {track.name}"]
    for key in sorted(_FLOAT_KEYS):
        out.append(f"{key} = {getattr(track, key)!r}")
    x, y, h = track.start
    out.append(f"start = {x!r} {y!r} {math.degrees(h)!r}")
    out.append("[segments]")
    for seg in track.segments:
        if isinstance(seg, Straight):
            out.append(f"straight {seg.length!r}")
        else:
            out.append(f"arc {seg.radius!r} {math.degrees(seg.angle)!r}")
    if track.boxes:
        out.append("[boxes]")
        out += [f"{b.cx!r} {b.cy!r} {b.length!r} {b.width!r} {b.height!r} {math.degrees(b.yaw)!r}" for b in track.boxes]
    if track.poles:
        out.append("[poles]")
        out += [f"{p.x!r} {p.y!r} {p.radius!r} {p.height!r}" for p in track.poles]
    return "\n".join(out) + "\n"


def with_segments(track: TrackSpec, segments) -> TrackSpec:
    return replace(track, segments=tuple(segments))
