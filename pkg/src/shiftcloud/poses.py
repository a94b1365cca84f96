"""Trajectory files in the TUM layout: ``timestamp tx ty tz qx qy qz qw``."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import RigidTransform


def read_poses(path) -> tuple[np.ndarray, list[RigidTransform]]:
    stamps: list[float] = []
    poses: list[RigidTransform] = []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(f"expected 8 fields, got {len(fields)}", path, lineno)
            try:
                vals = [float(v) for v in fields]
            except ValueError as e:
                raise ParseError(str(e), path, lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", path, lineno)
            if stamps and vals[0] <= stamps[-1]:
                raise ParseError("timestamps must be strictly increasing", path, lineno)
            try:
                poses.append(RigidTransform.from_quaternion(vals[1:4], vals[4:8]))
            except ConfigError as e:
                raise ParseError(str(e), path, lineno) from None
            stamps.append(vals[0])
    return np.asarray(stamps), poses


def format_poses(stamps, poses) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, pose in zip(stamps, poses):
        t = pose.translation
        q = pose.quaternion()
        vals = [ts, *t, *q]
        lines.append(" ".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_poses(path, stamps, poses) -> None:
    if len(stamps) != len(poses):
        raise ConfigError("stamps and poses differ in length")
    if np.any(np.diff(np.asarray(stamps, dtype=float)) <= 0):
        raise ConfigError("timestamps must be strictly increasing")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_poses(stamps, poses), encoding="ascii")
    os.replace(tmp, path)
