from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from ..errors import ConfigError
from ..geometry import RigidTransform, compose, orthonormalize, relative_transform


@dataclass(frozen=True)
class PoseNoiseModel:
    """Per-step RMS translation (m) and rotation (rad) error of emulated
    visual odometry. Errors enter each relative motion and accumulate."""

    translation_sigma: float = 0.01
    rotation_sigma: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.translation_sigma < 0 or self.rotation_sigma < 0:
            raise ConfigError("noise sigmas must be >= 0")


def perturb(poses, noise: PoseNoiseModel) -> list[RigidTransform]:
    """Re-integrate the sequence's relative motions with a small random error
    on each step, so drift grows along the sequence like odometry drift.

    Per step, translation noise is isotropic Gaussian with E|e|^2 =
    translation_sigma^2 (likewise for the rotation vector), so the RMS
    position drift after k steps is translation_sigma * sqrt(k) when there is
    no rotation noise.
    """
    poses = list(poses)
    if not poses or (noise.translation_sigma == 0 and noise.rotation_sigma == 0):
        return poses
    rng = np.random.default_rng(noise.seed)
    out = [poses[0]]
    for prev, cur in zip(poses[:-1], poses[1:]):
        step = relative_transform(prev, cur)
        rv = rng.normal(0.0, noise.rotation_sigma / np.sqrt(3.0), size=3)
        tv = rng.normal(0.0, noise.translation_sigma / np.sqrt(3.0), size=3)
        err = RigidTransform(Rotation.from_rotvec(rv).as_matrix(), tv)
        nxt = compose(compose(out[-1], step), err)
        out.append(RigidTransform(orthonormalize(nxt.rotation), nxt.translation))
    return out


@dataclass(frozen=True)
class DepthNoiseModel:
    """Errors of a learned monocular depth estimate after scale calibration:
    a per-frame scale error plus a smooth multiplicative error field whose
    strength grows linearly with depth (``rel_sigma`` at ``ref_depth``)."""

    scale_sigma: float = 0.0
    rel_sigma: float = 0.0
    ref_depth: float = 20.0
    smoothness: float = 6.0  # pixels, gaussian correlation length of the field

    def __post_init__(self):
        if self.scale_sigma < 0 or self.rel_sigma < 0:
            raise ConfigError("depth noise sigmas must be >= 0")
        if not self.ref_depth > 0 or self.smoothness < 0:
            raise ConfigError("ref_depth must be positive, smoothness >= 0")

    @property
    def active(self) -> bool:
        return self.scale_sigma > 0 or self.rel_sigma > 0


def corrupt_depth(depth: np.ndarray, noise: DepthNoiseModel, seed) -> np.ndarray:
    """Noisy copy of a depth raster; invalid (zero) pixels stay invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    if not noise.active:
        return depth.copy()
    rng = np.random.default_rng(seed)
    scale = 1.0 + noise.scale_sigma * rng.standard_normal()
    field = rng.standard_normal(depth.shape)
    if noise.smoothness > 0:
        field = ndimage.gaussian_filter(field, noise.smoothness, mode="reflect")
        sd = field.std()
        if sd > 0:
            field /= sd
    rel = noise.rel_sigma * depth / noise.ref_depth
    out = depth * max(scale, 0.05) * np.exp(rel * field)
    return np.where(depth > 0, out, 0.0)
