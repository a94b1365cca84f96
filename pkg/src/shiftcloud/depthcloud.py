"""Depth maps to edge-filtered, distance-limited, fixed-size point clouds."""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, DegenerateFrameError
from .geometry import CameraIntrinsics, PointCloud

DMAP_MAGIC = b"DMAP"


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Row-major depths in meters, shape (height, width). Entries <= 0 are invalid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ConfigError(f"depth map must be a non-empty 2D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ConfigError("depth map has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class EdgeMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim != 2:
            raise ConfigError("edge mask must be 2D")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class CloudConfig:
    max_distance: float = 20.0
    target_points: int = 4096
    dilation_radius: int = 1
    scale_factor: float = 1.0
    canny_low: float = 0.04
    canny_high: float = 0.1
    canny_sigma: float = 0.5
    edge_filter: bool = True

    def __post_init__(self):
        if not self.max_distance > 0:
            raise ConfigError("max_distance must be positive")
        if self.target_points <= 0:
            raise ConfigError("target_points must be positive")
        if self.dilation_radius < 0:
            raise ConfigError("dilation_radius must be >= 0")
        if not self.scale_factor > 0:
            raise ConfigError("scale_factor must be positive")
        if not 0 <= self.canny_low <= self.canny_high:
            raise ConfigError("need 0 <= canny_low <= canny_high")


def unproject(intr: CameraIntrinsics, depth: DepthMap, scale_factor: float = 1.0, frame: str = "cam") -> PointCloud:
    """Back-project every valid pixel; points carry their flat pixel index."""
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise ConfigError(
            f"depth map is {depth.width}x{depth.height}, intrinsics expect {intr.width}x{intr.height}"
        )
    flat = depth.values.reshape(-1)
    idx = np.flatnonzero(flat > 0)
    z = flat[idx] * scale_factor
    v, u = np.divmod(idx, depth.width)
    pts = np.column_stack([z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z])
    return PointCloud(pts, frame, idx)


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    # Quantized gradient direction; equal-magnitude plateaus keep the lower-index pixel.
    h, w = mag.shape
    pad = np.pad(mag, 1, mode="constant")
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    # (drow, dcol) of the "plus" neighbour per sector: x, diagonal, y, anti-diagonal
    offsets = [(0, 1), (1, 1), (1, 0), (1, -1)]
    tol = 1e-9 * (mag.max() if mag.size else 0.0)
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in enumerate(offsets):
        sel = sector == s
        plus = pad[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        minus = pad[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        keep |= sel & (mag >= plus - tol) & (mag > minus + tol)
    return keep


def edge_mask(image, low: float, high: float, sigma: float = 1.0) -> EdgeMask:
    """Canny-style edges: Gaussian smoothing, Sobel gradient, non-maximum
    suppression and hysteresis linking (8-connected).

    Thresholds apply to the gradient magnitude of the smoothed image, with the
    Sobel kernel normalized so a unit step yields magnitude 0.5.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ConfigError("edge detection needs a non-empty 2D raster")
    if not 0 <= low <= high:
        raise ConfigError("need 0 <= low <= high")
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gx, gy)
    thin = _nms(mag, gx, gy)
    weak = thin & (mag >= low) & (mag > 0)
    strong = weak & (mag >= high)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return EdgeMask(np.zeros(img.shape, dtype=bool))
    linked = np.zeros(n + 1, dtype=bool)
    linked[np.unique(labels[strong])] = True
    linked[0] = False
    return EdgeMask(linked[labels])


def dilate(mask: EdgeMask, radius: int) -> EdgeMask:
    if radius < 0:
        raise ConfigError("dilation radius must be >= 0")
    if radius == 0:
        return EdgeMask(mask.bits.copy())
    k = 2 * int(radius) + 1
    return EdgeMask(ndimage.binary_dilation(mask.bits, structure=np.ones((k, k), dtype=bool)))


def filter_cloud(cloud: PointCloud, mask: EdgeMask | None, cfg: CloudConfig) -> PointCloud:
    """Keep points whose source pixel is on the mask (``None`` keeps all)
    and whose distance from the camera origin is at most ``cfg.max_distance``."""
    keep = cloud.norms() <= cfg.max_distance
    if mask is not None:
        if cloud.pixel_index is None:
            raise ConfigError("edge filtering needs a cloud with source pixel indices")
        keep &= mask.bits.reshape(-1)[cloud.pixel_index]
    return cloud.subset(keep)


def sample_fixed(cloud: PointCloud, n: int, seed) -> PointCloud:
    """Exactly ``n`` points: subsample without replacement, or keep every point
    and pad with duplicates drawn with replacement."""
    if n <= 0:
        raise ConfigError("sample size must be positive")
    m = len(cloud)
    if m == 0:
        raise DegenerateFrameError("cannot sample from an empty cloud")
    rng = np.random.default_rng(seed)
    if m >= n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = rng.permutation(np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)]))
    return cloud.subset(idx)


def estimate_scale(intr: CameraIntrinsics, depth: DepthMap, camera_height: float, ground: np.ndarray | None = None) -> float:
    """Scale factor mapping normalized depth to meters from the known camera
    height above a flat road (level camera, +Y down).

    ``ground`` marks pixels known to see the road; by default the bottom
    quarter of the image is assumed to.
    """
    if not camera_height > 0:
        raise ConfigError("camera height must be positive")
    if ground is None:
        ground = np.zeros((depth.height, depth.width), dtype=bool)
        ground[depth.height - depth.height // 4 :, :] = True
    cloud = unproject(intr, depth)
    sel = np.asarray(ground, dtype=bool).reshape(-1)[cloud.pixel_index]
    heights = cloud.points[sel, 1]
    heights = heights[heights > 0]
    if heights.size == 0:
        raise DataError("no ground pixels below the horizon to calibrate from")
    return float(camera_height / np.median(heights))


def frame_cloud(intr: CameraIntrinsics, depth: DepthMap, intensity, cfg: CloudConfig, frame: str = "cam") -> PointCloud:
    """Full per-frame pipeline up to (not including) fixed-size sampling."""
    cloud = unproject(intr, depth, cfg.scale_factor, frame)
    mask = None
    if cfg.edge_filter:
        mask = dilate(edge_mask(intensity, cfg.canny_low, cfg.canny_high, cfg.canny_sigma), cfg.dilation_radius)
    return filter_cloud(cloud, mask, cfg)


def write_dmap(path, depth: DepthMap) -> None:
    data = struct.pack("<4sII", DMAP_MAGIC, depth.width, depth.height)
    data += depth.values.astype("<f4").tobytes(order="C")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read_dmap(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DMAP_MAGIC:
        raise DataError(f"{path}: not a DMAP file")
    w, h = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * w * h
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {w}x{h}, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float64)
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}: non-finite depth values")
    return DepthMap(vals)


def horizontal_fov(intr: CameraIntrinsics) -> float:
    return 2.0 * math.atan(intr.width / (2.0 * intr.fx))
