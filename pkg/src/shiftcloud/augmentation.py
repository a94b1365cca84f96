"""Synthesize point clouds for laterally shifted cameras from a reference sequence.

A new camera C sits at ``T_C = T_B T_x`` next to base frame B. Its cloud is
built from B's cloud plus aligned clouds of preceding frames (which see the
regions B misses), moved into C's frame and cropped to C's field of view.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateFrameError
from .geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    compose,
    fov_mask,
    inverse,
    lateral_shift,
    project_points,
    relative_transform,
    transform_points,
)

log = logging.getLogger(__name__)

# counteraction treats the view as this many pixels wider on each side, so
# points on the image border cannot slip back in through rounding
BORDER = 1e-6


def frame_tag(frame_id: int, offset: float = 0.0) -> str:
    return f"cam{frame_id}" if offset == 0 else f"cam{frame_id}@{offset:+.6g}"


@dataclass(frozen=True, eq=False)
class FrameRecord:
    id: int
    pose: RigidTransform
    cloud: PointCloud
    timestamp: float = 0.0
    offset: float = 0.0
    provenance: np.ndarray | None = None  # source frame id of every point
    flagged: bool = False

    def __post_init__(self):
        if self.cloud.frame != self.frame:
            raise ConfigError(f"cloud frame {self.cloud.frame!r} does not match frame {self.frame!r}")

    @property
    def frame(self) -> str:
        return frame_tag(self.id, self.offset)


@dataclass(frozen=True)
class AugmentConfig:
    offsets: tuple = tuple(np.linspace(-2.0, 2.0, 10).tolist())
    max_lookback: int = 8
    counteract: bool = True
    align: bool = True
    max_distance: float = 20.0
    coverage_threshold: float = 0.98
    coverage_cell: int = 16  # pixels per side of a coverage-grid cell

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(float(o) for o in self.offsets))
        if self.max_lookback < 0:
            raise ConfigError("max_lookback must be >= 0")
        if not all(math.isfinite(o) for o in self.offsets):
            raise ConfigError("offsets must be finite")
        if any(o == 0 for o in self.offsets):
            raise ConfigError("offset 0 is the reference trajectory, which is always produced")
        if len(set(self.offsets)) != len(self.offsets):
            raise ConfigError("duplicate offsets")
        if not self.max_distance > 0:
            raise ConfigError("max_distance must be positive")


def align_concat(base: FrameRecord, prev: FrameRecord) -> PointCloud:
    """``[T_BA P_0, P_1]``: ``prev``'s cloud re-expressed in ``base``'s frame,
    followed by ``base``'s own points."""
    t_ba = relative_transform(base.pose, prev.pose)
    aligned = transform_points(t_ba, prev.cloud.points)
    return PointCloud(np.concatenate([aligned, base.cloud.points]), base.frame)


def counteract_filter(base: FrameRecord, aligned_prev: PointCloud, intr: CameraIntrinsics) -> PointCloud:
    """Keep only the aligned points that fall outside ``base``'s image plane."""
    if aligned_prev.frame != base.frame:
        raise ConfigError("aligned cloud must be expressed in the base frame")
    return aligned_prev.subset(~fov_mask(intr, aligned_prev.points, BORDER))


class _CoverageGrid:
    """Occupied cells of a coarse grid over the image plane."""

    def __init__(self, intr: CameraIntrinsics, cell: int):
        self.intr, self.cell = intr, cell
        self.gw = max(1, math.ceil(intr.width / cell))
        self.occ = np.zeros(self.gw * max(1, math.ceil(intr.height / cell)), dtype=bool)

    def add(self, pts_c: np.ndarray) -> float:
        inside = fov_mask(self.intr, pts_c)
        if inside.any():
            x_im, y_im, _ = project_points(self.intr, pts_c[inside])
            c = self.cell
            self.occ[(y_im // c).astype(np.int64) * self.gw + (x_im // c).astype(np.int64)] = True
        return float(self.occ.mean())


def _aligned_parts(frames, base_idx, intr, cfg):
    """Yield (points, source id) of each preceding frame in the base frame,
    nearest first, with counteraction against every frame used so far."""
    base = frames[base_idx]
    used = [RigidTransform.identity()]  # base -> camera of every accumulated frame
    for k in range(1, cfg.max_lookback + 1):
        if base_idx - k < 0:
            return
        prev = frames[base_idx - k]
        t_ba = relative_transform(base.pose, prev.pose)
        pts = transform_points(t_ba, prev.cloud.points)
        if cfg.counteract:
            keep = np.ones(len(pts), dtype=bool)
            for t_jb in used:
                keep &= ~fov_mask(intr, transform_points(t_jb, pts), BORDER)
            pts = pts[keep]
        used.append(inverse(t_ba))
        yield pts, prev.id


def synthesize_frame(
    frames: Sequence[FrameRecord],
    base_idx: int,
    x: float,
    intr: CameraIntrinsics,
    cfg: AugmentConfig,
    _parts=None,
) -> FrameRecord:
    """Cloud and pose of a camera shifted laterally by ``x`` from ``frames[base_idx]``.

    Preceding frames are walked nearest first; each aligned cloud only
    contributes points outside the image planes of the frames already used
    (when ``cfg.counteract``), until ``cfg.max_lookback`` frames are used or
    the shifted view's coarse pixel-grid coverage reaches
    ``cfg.coverage_threshold``. The result is flagged when the walk ran out of
    preceding frames before either stop condition.
    """
    if not 0 <= base_idx < len(frames):
        raise IndexError(f"base index {base_idx} out of range")
    base = frames[base_idx]
    shift = lateral_shift(x)
    to_c = inverse(shift)

    parts = [base.cloud.points]
    prov = [np.full(len(base.cloud), base.id, dtype=np.int64)]
    flagged = False
    if cfg.align and cfg.max_lookback > 0:
        grid = _CoverageGrid(intr, cfg.coverage_cell)
        grid.add(transform_points(to_c, base.cloud.points))
        covered = False
        source = _parts if _parts is not None else _aligned_parts(frames, base_idx, intr, cfg)
        for pts, src in source:
            parts.append(pts)
            prov.append(np.full(len(pts), src, dtype=np.int64))
            if grid.add(transform_points(to_c, pts)) >= cfg.coverage_threshold:
                covered = True
                break
        flagged = not covered and base_idx < cfg.max_lookback

    pts = np.concatenate(parts)
    provenance = np.concatenate(prov)
    if x != 0:
        pts = transform_points(to_c, pts)
    keep = fov_mask(intr, pts) & (np.linalg.norm(pts, axis=1) <= cfg.max_distance)
    pts, provenance = pts[keep], provenance[keep]
    if len(pts) == 0:
        raise DegenerateFrameError(f"frame {base.id} at offset {x}: no points in view")
    return FrameRecord(
        id=base.id,
        pose=compose(base.pose, shift),
        cloud=PointCloud(pts, frame_tag(base.id, x)),
        timestamp=base.timestamp,
        offset=float(x),
        provenance=provenance,
        flagged=flagged,
    )


@dataclass
class Trajectory:
    offset: float
    frames: list = field(default_factory=list)
    dropped: list = field(default_factory=list)  # base frame ids with no usable cloud

    @property
    def is_reference(self) -> bool:
        return self.offset == 0


def _reference_config(cfg: AugmentConfig) -> AugmentConfig:
    return AugmentConfig(offsets=(), max_lookback=0, counteract=cfg.counteract, align=False,
                         max_distance=cfg.max_distance, coverage_threshold=cfg.coverage_threshold,
                         coverage_cell=cfg.coverage_cell)


def synthesize_base(frames, base_idx: int, intr: CameraIntrinsics, cfg: AugmentConfig) -> list:
    """Reference frame plus one synthesized frame per offset for a single base
    frame (``None`` where the frame is degenerate). The aligned history is
    computed once and shared by every offset."""
    out = []
    try:
        out.append(synthesize_frame(frames, base_idx, 0.0, intr, _reference_config(cfg)))
    except DegenerateFrameError:
        out.append(None)
    parts = list(_aligned_parts(frames, base_idx, intr, cfg)) if cfg.align and cfg.offsets else None
    for off in cfg.offsets:
        try:
            out.append(synthesize_frame(frames, base_idx, off, intr, cfg, _parts=parts))
        except DegenerateFrameError as e:
            log.debug("dropping frame: %s", e)
            out.append(None)
    return out


def collect_trajectories(frames, per_base, cfg: AugmentConfig) -> list[Trajectory]:
    """Regroup ``synthesize_base`` results (one list per base frame) by offset."""
    trajs = [Trajectory(o) for o in (0.0, *cfg.offsets)]
    for f, row in zip(frames, per_base):
        for traj, rec in zip(trajs, row):
            if rec is None:
                traj.dropped.append(f.id)
            else:
                traj.frames.append(rec)
    return trajs


def generate_trajectories(frames: Sequence[FrameRecord], intr: CameraIntrinsics, cfg: AugmentConfig) -> list[Trajectory]:
    """Reference trajectory (FOV and distance cropping only) followed by one
    synthesized trajectory per configured offset."""
    if not frames:
        raise ConfigError("empty frame sequence")
    per_base = [synthesize_base(frames, i, intr, cfg) for i in range(len(frames))]
    return collect_trajectories(frames, per_base, cfg)
