"""Lateral-offset labels between frame pairs and the offset-to-steering map."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .depthcloud import sample_fixed
from .errors import ConfigError, DegenerateFrameError, EndOfTrajectory
from .geometry import PointCloud, RigidTransform, relative_transform

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SteeringParams:
    alpha: float = 0.2
    lookahead: float = 5.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError("alpha must be positive")
        if not (self.lookahead > 0 and math.isfinite(self.lookahead)):
            raise ConfigError("lookahead must be positive")


@dataclass(frozen=True)
class LabelConfig:
    lookahead: float = 5.0
    clamp: float = 4.0  # same bound as the network's output scale
    seed: int = 0
    exclude_flagged: bool = True

    def __post_init__(self):
        if not self.lookahead > 0:
            raise ConfigError("lookahead must be positive")
        if not self.clamp > 0:
            raise ConfigError("clamp must be positive")


@dataclass(frozen=True, eq=False)
class LabeledSample:
    cloud: PointCloud
    delta_x: float
    source: tuple  # (trajectory offset, frame id)
    future_id: int = -1


def _pose(f) -> RigidTransform:
    return f if isinstance(f, RigidTransform) else f.pose


def select_future_frame(frames, i: int, lookahead: float) -> int:
    """Smallest ``j > i`` lying at least ``lookahead`` ahead along frame i's
    optical axis. ``frames`` holds poses or anything with a ``.pose``."""
    if not lookahead > 0:
        raise ConfigError("lookahead must be positive")
    if not 0 <= i < len(frames):
        raise IndexError(f"frame index {i} out of range")
    p_i = _pose(frames[i])
    for j in range(i + 1, len(frames)):
        if relative_transform(p_i, _pose(frames[j])).translation[2] >= lookahead:
            return j
    raise EndOfTrajectory(f"no frame {lookahead} m ahead of frame {i}")


def lateral_offset(pose_i: RigidTransform, pose_j: RigidTransform) -> float:
    return float(relative_transform(pose_i, pose_j).translation[0])


def steering_from_offset(delta_x, p: SteeringParams):
    return np.arctan(np.asarray(delta_x, dtype=np.float64) * p.alpha) if np.ndim(delta_x) else math.atan(delta_x * p.alpha)


def sample_seed(seed: int, traj_idx: int, frame_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, traj_idx, frame_id])


@dataclass
class DatasetStats:
    counts: dict  # offset -> samples kept
    dropped: dict  # offset -> samples without a usable future frame / cloud
    flagged: dict  # offset -> samples excluded for short lookback
    clamped: int = 0


def build_dataset(trajectories, cfg: LabelConfig, points: int) -> tuple[list[LabeledSample], DatasetStats]:
    """Samples of exactly ``points`` points with corrective labels.

    Every sample's target is the reference trajectory's future frame, so a
    frame synthesized at offset ``o`` on a straight road is labelled ``-o``.
    """
    refs = [t for t in trajectories if t.offset == 0]
    if len(refs) != 1:
        raise ConfigError("exactly one reference trajectory (offset 0) is required")
    ref = refs[0]
    ref_index = {f.id: k for k, f in enumerate(ref.frames)}
    stats = DatasetStats({}, {}, {})
    samples = []
    for t_idx, traj in enumerate(trajectories):
        kept = dropped = flagged = 0
        for f in traj.frames:
            if cfg.exclude_flagged and f.flagged:
                flagged += 1
                continue
            k = ref_index.get(f.id)
            if k is None:
                dropped += 1
                continue
            try:
                j = select_future_frame(ref.frames, k, cfg.lookahead)
            except EndOfTrajectory:
                dropped += 1
                continue
            target = ref.frames[j]
            dx = lateral_offset(f.pose, target.pose)
            if abs(dx) > cfg.clamp:
                log.debug("label %.3f at offset %g frame %d clamped to +-%g", dx, traj.offset, f.id, cfg.clamp)
                dx = math.copysign(cfg.clamp, dx)
                stats.clamped += 1
            try:
                cloud = sample_fixed(f.cloud, points, sample_seed(cfg.seed, t_idx, f.id))
            except DegenerateFrameError:
                dropped += 1
                continue
            samples.append(LabeledSample(cloud, dx, (traj.offset, f.id), target.id))
            kept += 1
        stats.counts[traj.offset] = kept
        stats.dropped[traj.offset] = dropped + len(traj.dropped)
        stats.flagged[traj.offset] = flagged
    if stats.clamped:
        log.warning("%d labels clamped to +-%g", stats.clamped, cfg.clamp)
    return samples, stats
