"""Closed-form ray casting of a track scene into depth, intensity and edge rasters."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..depthcloud import DepthMap, EdgeMask
from ..errors import InvalidPose
from ..geometry import CameraIntrinsics, RigidTransform
from .track import Centerline, Straight, TrackSpec

# surface classes
SKY, GRASS, ASPHALT, MARKING, BARRIER, POLE, BOX = range(7)

INTENSITY = np.array([0.0, 0.45, 0.15, 0.95, 0.7, 0.9, 0.6])

RENDER_RANGE = 150.0
_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    depth: DepthMap
    intensity: np.ndarray
    edge_truth: EdgeMask
    labels: np.ndarray  # surface class * 100000 + object index
    pose: RigidTransform
    timestamp: float = 0.0


def _pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    d = np.stack(
        [(u.ravel() - intr.cx) / intr.fx, (v.ravel() - intr.cy) / intr.fy, np.ones(u.size)], axis=1
    )
    return d


_ray_cache: dict = {}


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray per pixel, scaled so its Z component is 1; the ray
    parameter of a hit is therefore the camera-frame depth."""
    rays = _ray_cache.get(intr)
    if rays is None:
        rays = _pixel_rays(intr)
        rays.setflags(write=False)
        _ray_cache[intr] = rays
    return rays


class Scene:
    """Precomputed primitives for one track.

    Rays are culled per primitive by world azimuth: every primitive carries a
    conservative set of bounding points, and only rays whose bearing falls in
    the angular hull of those points are intersected exactly.
    """

    def __init__(self, track: TrackSpec):
        self.track = track
        self.line = Centerline(track)
        self.walls = []
        for i, p in enumerate(self.line.placed):
            for j, off in enumerate((track.left_barrier, track.right_barrier)):
                self.walls += _wall_pieces(p, off, 2 * i + j)
        poles = []
        if track.pole_spacing > 0:
            n = int(self.line.length // track.pole_spacing)
            for k in range(n + 1):
                x, y, h = self.line.point(k * track.pole_spacing)
                poles.append((x - math.sin(h) * track.pole_offset, y + math.cos(h) * track.pole_offset,
                              track.pole_radius, track.pole_height))
        for pl in track.poles:
            poles.append((pl.x, pl.y, pl.radius, pl.height))
        self.poles = np.array(poles, dtype=np.float64).reshape(-1, 4)
        self.boxes = list(track.boxes)

    def render(self, pose: RigidTransform, intr: CameraIntrinsics, timestamp: float = 0.0,
               render_range: float = RENDER_RANGE) -> RenderedFrame:
        origin = pose.translation
        if origin[2] >= 0:
            raise InvalidPose(f"camera at height {-origin[2]} is not above the ground")
        rays = pixel_rays(intr) @ pose.rotation.T  # world directions, camera-depth parameterized
        n = rays.shape[0]
        lam = np.full(n, np.inf)
        label = np.zeros(n, dtype=np.int64)  # SKY
        bearing = _RayIndex(rays)

        self._hit_walls(origin, rays, bearing, lam, label, render_range)
        self._hit_poles(origin, rays, bearing, lam, label, render_range)
        self._hit_boxes(origin, rays, lam, label)
        self._hit_ground(origin, rays, lam, label, render_range)

        depth = np.where(np.isfinite(lam) & (lam <= render_range), lam, 0.0)
        label = np.where(depth > 0, label, SKY)
        label = label.reshape(intr.height, intr.width)
        cls = label // 100000
        intensity = INTENSITY[cls]
        # material boundaries, marked on the lower-index pixel of each pair
        edges = np.zeros(label.shape, dtype=bool)
        edges[:, :-1] |= cls[:, :-1] != cls[:, 1:]
        edges[:-1, :] |= cls[:-1, :] != cls[1:, :]
        return RenderedFrame(
            DepthMap(depth.reshape(intr.height, intr.width)),
            intensity,
            EdgeMask(edges),
            label,
            pose,
            timestamp,
        )

    def _hit_ground(self, o, rays, lam, label, render_range):
        dz = rays[:, 2]
        down = dz > _EPS
        t = np.full(rays.shape[0], np.inf)
        t[down] = -o[2] / dz[down]
        closer = (t < lam) & (t <= render_range)
        idx = np.flatnonzero(closer)
        if idx.size == 0:
            return
        lam[idx] = t[idx]
        hx = o[0] + t[idx] * rays[idx, 0]
        hy = o[1] + t[idx] * rays[idx, 1]
        s, d, ok = self.line.coords(hx, hy)
        tr = self.track
        cls = np.full(idx.size, GRASS)
        on_road = ok & (d >= tr.left_edge - tr.shoulder) & (d <= tr.right_edge + tr.shoulder)
        cls[on_road] = ASPHALT
        half = tr.marking_width / 2
        left, center, right = tr.marking_offsets
        mark = ok & ((np.abs(d - left) <= half) | (np.abs(d - right) <= half))
        period = tr.dash_length + tr.dash_gap
        dashed = ok & (np.abs(d - center) <= half) & (np.mod(s, period) < tr.dash_length)
        cls[mark | dashed] = MARKING
        label[idx] = cls * 100000

    def _hit_walls(self, o, rays, bearing, lam, label, render_range):
        height = self.track.barrier_height
        for k, w in enumerate(self.walls):
            if w.near_dist(o) > render_range:
                continue
            idx = bearing.within(o, w.hull)
            if idx.size == 0:
                continue
            r = rays[idx]
            for t in w.intersect(o, r):
                cand = np.flatnonzero((t > _EPS) & (t < lam[idx]))
                if cand.size == 0:
                    continue
                tc, rc = t[cand], r[cand]
                hz = o[2] + tc * rc[:, 2]
                good = (hz <= 0) & (hz >= -height) & w.contains(o[0] + tc * rc[:, 0], o[1] + tc * rc[:, 1])
                sel = idx[cand[good]]
                lam[sel] = tc[good]
                label[sel] = BARRIER * 100000 + w.wall_id

    def _hit_poles(self, o, rays, bearing, lam, label, render_range):
        if not len(self.poles):
            return
        dist = np.hypot(self.poles[:, 0] - o[0], self.poles[:, 1] - o[1])
        for k in np.flatnonzero(dist - self.poles[:, 2] <= render_range):
            px, py, rad, height = self.poles[k]
            if dist[k] <= rad:
                idx = np.arange(rays.shape[0])
            else:
                half = math.asin(rad / dist[k]) + 1e-6
                mid = math.atan2(py - o[1], px - o[0])
                idx = bearing.interval(mid - half, mid + half)
            if idx.size == 0:
                continue
            r = rays[idx]
            for t in _circle_roots(o[0] - px, o[1] - py, r, rad):
                cand = np.flatnonzero((t > _EPS) & (t < lam[idx]))
                if cand.size == 0:
                    continue
                tc = t[cand]
                hz = o[2] + tc * r[cand, 2]
                good = (hz <= 0) & (hz >= -height)
                sel = idx[cand[good]]
                lam[sel] = tc[good]
                label[sel] = POLE * 100000 + int(k)

    def _hit_boxes(self, o, rays, lam, label):
        for k, b in enumerate(self.boxes):
            c, s = math.cos(b.yaw), math.sin(b.yaw)
            # box frame: a along yaw, b across, z down
            ox = (o[0] - b.cx) * c + (o[1] - b.cy) * s
            oy = -(o[0] - b.cx) * s + (o[1] - b.cy) * c
            oz = o[2] + b.height / 2
            dx = rays[:, 0] * c + rays[:, 1] * s
            dy = -rays[:, 0] * s + rays[:, 1] * c
            dz = rays[:, 2]
            tmin = np.full(rays.shape[0], -np.inf)
            tmax = np.full(rays.shape[0], np.inf)
            for oc, dc, half in ((ox, dx, b.length / 2), (oy, dy, b.width / 2), (oz, dz, b.height / 2)):
                with np.errstate(divide="ignore", invalid="ignore"):
                    t1 = (-half - oc) / dc
                    t2 = (half - oc) / dc
                lo = np.where(np.abs(dc) > _EPS, np.minimum(t1, t2), np.where(abs(oc) <= half, -np.inf, np.inf))
                hi = np.where(np.abs(dc) > _EPS, np.maximum(t1, t2), np.where(abs(oc) <= half, np.inf, -np.inf))
                tmin = np.maximum(tmin, lo)
                tmax = np.minimum(tmax, hi)
            hit = (tmax >= tmin) & (tmin > _EPS) & (tmin < lam)
            lam[hit] = tmin[hit]
            label[hit] = BOX * 100000 + k


class _RayIndex:
    """Rays sorted by world azimuth for interval queries."""

    def __init__(self, rays):
        az = np.arctan2(rays[:, 1], rays[:, 0])
        self.order = np.argsort(az, kind="stable")
        self.sorted = az[self.order]
        self.all = np.arange(rays.shape[0])

    def interval(self, lo, hi):
        if hi - lo >= 2 * math.pi:
            return self.all
        lo = (lo + math.pi) % (2 * math.pi) - math.pi
        hi = lo + (hi - lo if hi >= lo else hi - lo + 2 * math.pi)
        a = np.searchsorted(self.sorted, lo, side="left")
        if hi <= math.pi:
            b = np.searchsorted(self.sorted, hi, side="right")
            return np.sort(self.order[a:b])
        b = np.searchsorted(self.sorted, hi - 2 * math.pi, side="right")
        return np.sort(np.concatenate([self.order[a:], self.order[:b]]))

    def within(self, o, hull):
        """Rays whose bearing lies in the angular hull of ``hull`` points seen
        from ``o``; all rays if ``o`` may lie inside the hull."""
        dx = hull[:, 0] - o[0]
        dy = hull[:, 1] - o[1]
        ang = np.arctan2(dy, dx)
        ref = ang[0]
        rel = (ang - ref + math.pi) % (2 * math.pi) - math.pi
        lo, hi = rel.min(), rel.max()
        if hi - lo >= math.pi - 1e-6 or _inside(o, hull):
            return self.all
        return self.interval(ref + lo - 1e-6, ref + hi + 1e-6)


def _inside(o, hull) -> bool:
    # hull points form a convex polygon in order (segment or triangle)
    if len(hull) < 3:
        return False
    x, y = o[0], o[1]
    signs = []
    for (x1, y1), (x2, y2) in zip(hull, np.roll(hull, -1, axis=0)):
        signs.append((x2 - x1) * (y - y1) - (y2 - y1) * (x - x1))
    signs = np.array(signs)
    return bool(np.all(signs >= -1e-9) or np.all(signs <= 1e-9))


class _StraightWall:
    def __init__(self, p, off, wall_id):
        self.wall_id = wall_id
        ch, sh = math.cos(p.h0), math.sin(p.h0)
        self.nx, self.ny = -sh, ch
        self.tx, self.ty = ch, sh
        self.x0 = p.x0 + off * self.nx
        self.y0 = p.y0 + off * self.ny
        self.length = p.seg.length
        x1, y1 = self.x0 + self.length * ch, self.y0 + self.length * sh
        self.hull = np.array([[self.x0, self.y0], [x1, y1]])

    def near_dist(self, o):
        ax, ay = o[0] - self.x0, o[1] - self.y0
        u = min(max(ax * self.tx + ay * self.ty, 0.0), self.length)
        return math.hypot(ax - u * self.tx, ay - u * self.ty)

    def intersect(self, o, r):
        denom = r[:, 0] * self.nx + r[:, 1] * self.ny
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -((o[0] - self.x0) * self.nx + (o[1] - self.y0) * self.ny) / denom
        return (np.where(np.abs(denom) > _EPS, t, np.inf),)

    def contains(self, hx, hy):
        u = (hx - self.x0) * self.tx + (hy - self.y0) * self.ty
        return (u >= -1e-9) & (u <= self.length + 1e-9)


class _ArcWall:
    """Piece of a vertical cylinder wall spanning at most 30 degrees."""

    def __init__(self, cx, cy, radius, a0, a1, wall_id):
        self.wall_id = wall_id
        self.cx, self.cy, self.radius = cx, cy, radius
        self.mid = (a0 + a1) / 2
        self.half = abs(a1 - a0) / 2
        p0 = (cx + radius * math.cos(a0), cy + radius * math.sin(a0))
        p1 = (cx + radius * math.cos(a1), cy + radius * math.sin(a1))
        # tangent lines at the ends meet at distance radius / cos(half) along the bisector
        rt = radius / math.cos(self.half)
        tip = (cx + rt * math.cos(self.mid), cy + rt * math.sin(self.mid))
        self.hull = np.array([p0, tip, p1])
        self.chord = np.array([p0, p1])

    def near_dist(self, o):
        # the piece lies inside its hull triangle
        span = max(math.hypot(a[0] - b[0], a[1] - b[1]) for a in self.hull for b in self.hull)
        return max(0.0, min(math.hypot(o[0] - x, o[1] - y) for x, y in self.hull) - span)

    def intersect(self, o, r):
        return _circle_roots(o[0] - self.cx, o[1] - self.cy, r, self.radius)

    def contains(self, hx, hy):
        ang = np.arctan2(hy - self.cy, hx - self.cx)
        rel = np.mod(ang - self.mid + math.pi, 2 * math.pi) - math.pi
        return np.abs(rel) <= self.half + 1e-12


def _wall_pieces(p, off, wall_id):
    if isinstance(p.seg, Straight):
        return [_StraightWall(p, off, wall_id)]
    seg = p.seg
    r = 1.0 / seg.curvature
    cx, cy = p.x0 - r * math.sin(p.h0), p.y0 + r * math.cos(p.h0)
    rho = abs(r - off)
    # polar angle of the centerline start as seen from the center
    a_start = math.atan2(p.y0 - cy, p.x0 - cx)
    sweep = seg.angle  # polar angle advances with heading
    pieces = max(1, int(math.ceil(abs(sweep) / math.radians(30))))
    out = []
    for i in range(pieces):
        a0 = a_start + sweep * i / pieces
        a1 = a_start + sweep * (i + 1) / pieces
        out.append(_ArcWall(cx, cy, rho, a0, a1, wall_id))
    return out


def _circle_roots(ox, oy, rays, radius):
    """Ray parameters where the ground-plane projection of each ray meets a
    circle of ``radius`` centered at the origin (ray origin offset ox, oy)."""
    a = rays[:, 0] ** 2 + rays[:, 1] ** 2
    b = 2 * (ox * rays[:, 0] + oy * rays[:, 1])
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # numerically stable pair of roots
        q = -0.5 * (b + np.copysign(sq, b))
        r1 = q / a
        r2 = c / q
    r1 = np.where(ok, r1, np.inf)
    r2 = np.where(ok & (q != 0), r2, np.inf)
    return np.minimum(r1, r2), np.maximum(r1, r2)


@lru_cache(maxsize=16)
def scene_for(track: TrackSpec) -> Scene:
    return Scene(track)


def render(track: TrackSpec, pose: RigidTransform, intr: CameraIntrinsics, timestamp: float = 0.0,
           render_range: float = RENDER_RANGE) -> RenderedFrame:
    return scene_for(track).render(pose, intr, timestamp, render_range)
