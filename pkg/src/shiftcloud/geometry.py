"""SE(3) poses, pinhole projection and field-of-view tests.

Conventions
-----------
Camera frames: +Z forward (optical axis), +X right (lateral), +Y down.
A pose ``T`` maps local coordinates into its parent frame: ``p_parent = R p + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError, DegenerateProjectionError

ORTHO_TOL = 1e-9
QUAT_NORM_TOL = 1e-3

WORLD = "world"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ConfigError(f"bad transform shapes {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ConfigError("transform has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= ORTHO_TOL:
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ConfigError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ConfigError(f"expected 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quat_xyzw) -> RigidTransform:
        """Build a pose from ``(qx, qy, qz, qw)``; the quaternion is normalized,
        and rejected if its norm is off by more than ``QUAT_NORM_TOL``."""
        q = np.asarray(quat_xyzw, dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > QUAT_NORM_TOL:
            raise ConfigError(f"quaternion norm {n} deviates from 1")
        r = Rotation.from_quat(q / n).as_matrix()
        return cls(orthonormalize(r), translation)

    def quaternion(self) -> np.ndarray:
        """Rotation as ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(np.max(np.abs(self.matrix - other.matrix)) <= atol)

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def orthonormalize(r) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def relative_transform(t_b: RigidTransform, t_a: RigidTransform) -> RigidTransform:
    """``T_B^-1 T_A``: maps coordinates expressed in frame A into frame B."""
    return compose(inverse(t_b), t_a)


def lateral_shift(x: float) -> RigidTransform:
    if not np.isfinite(x):
        raise ConfigError(f"lateral shift must be finite, got {x}")
    return RigidTransform(np.eye(3), [float(x), 0.0, 0.0])


def transform_points(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ t.rotation.T + t.translation


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points (N x 3, meters) tagged with the frame they are expressed in.

    ``pixel_index`` optionally records the flat source-pixel index of each
    point (set by unprojection, consumed by edge filtering).
    """

    points: np.ndarray
    frame: str
    pixel_index: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ConfigError("point cloud has non-finite coordinates")
        if self.frame is None or self.frame == "":
            raise ConfigError("point cloud needs a frame tag")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.pixel_index is not None:
            idx = np.array(self.pixel_index, dtype=np.int64).reshape(-1)
            if idx.shape[0] != pts.shape[0]:
                raise ConfigError("pixel_index length does not match points")
            idx.setflags(write=False)
            object.__setattr__(self, "pixel_index", idx)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, keep) -> PointCloud:
        """Points selected by a boolean mask or index array, same frame."""
        idx = None if self.pixel_index is None else self.pixel_index[keep]
        return PointCloud(self.points[keep], self.frame, idx)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


def apply(t: RigidTransform, cloud: PointCloud, frame: str | None = None) -> PointCloud:
    """Map every point through ``t``; the result is tagged ``frame`` (default:
    keep the input tag, for callers that track frames themselves)."""
    return PointCloud(transform_points(t, cloud.points), cloud.frame if frame is None else frame)


def concat(clouds: Sequence[PointCloud]) -> PointCloud:
    if not clouds:
        raise ConfigError("nothing to concatenate")
    frame = clouds[0].frame
    for c in clouds[1:]:
        if c.frame != frame:
            raise ConfigError(f"cannot mix clouds in frames {frame!r} and {c.frame!r}")
    return PointCloud(np.concatenate([c.points for c in clouds], axis=0), frame)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.width > 0 and self.height > 0):
            raise ConfigError("focal lengths and image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> CameraIntrinsics:
        """Square pixels, principal point at the image center."""
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, int(width), int(height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class ImagePoint:
    x_im: float
    y_im: float
    depth: float


def project(intr: CameraIntrinsics, point) -> ImagePoint:
    x, y, z = (float(v) for v in point)
    if z == 0.0:
        raise DegenerateProjectionError(f"point {point} lies in the camera plane")
    return ImagePoint((intr.fx * x + intr.cx * z) / z, (intr.fy * y + intr.cy * z) / z, z)


def in_image_plane(intr: CameraIntrinsics, ip: ImagePoint) -> bool:
    return bool(
        ip.depth > 0
        and 0 <= ip.x_im < intr.width
        and 0 <= ip.y_im < intr.height
    )


def project_points(intr: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ``project``. Points with Z = 0 get NaN pixel coordinates."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z == 0.0, np.nan, z)
        x_im = (intr.fx * p[:, 0] + intr.cx * z) / safe
        y_im = (intr.fy * p[:, 1] + intr.cy * z) / safe
    return x_im, y_im, z


def fov_mask(intr: CameraIntrinsics, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points whose projection lands inside the image plane,
    grown by ``margin`` pixels on every side."""
    x_im, y_im, z = project_points(intr, points)
    m = margin
    with np.errstate(invalid="ignore"):
        return (z > 0) & (x_im >= -m) & (x_im < intr.width + m) & (y_im >= -m) & (y_im < intr.height + m)


def random_transform(rng: np.random.Generator, scale: float = 10.0) -> RigidTransform:
    r = Rotation.random(random_state=rng).as_matrix()
    return RigidTransform(orthonormalize(r), rng.uniform(-scale, scale, size=3))


def stack_matrices(poses: Iterable[RigidTransform]) -> np.ndarray:
    return np.stack([p.matrix for p in poses])
