"""Minimal PLY point-cloud I/O: a ``vertex`` element with ``x y z`` properties,
ASCII or binary little-endian."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def encode_ply(points, binary: bool = True, comments=()) -> bytes:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        return head + pts.astype("<f4").tobytes()
    body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts.astype(np.float32).astype(np.float64))
    return head + body.encode("ascii")


def write_ply(path, points, binary: bool = True, comments=()) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_ply(points, binary, comments))
    os.replace(tmp, path)


def read_ply(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise DataError(f"{path}: list properties are not supported")
            if parts[1] not in _TYPES:
                raise DataError(f"{path}: unknown property type {parts[1]}")
            elements[-1][2].append((parts[2], _TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise DataError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: vertex element lacks x/y/z")
    if fmt == "binary_little_endian":
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        if len(raw) - body_start < dtype.itemsize * count:
            raise DataError(f"{path}: truncated vertex data")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        pts = np.column_stack([arr["x"], arr["y"], arr["z"]]).astype(np.float64)
    elif fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()][:count]
        if len(rows) < count:
            raise DataError(f"{path}: expected {count} vertices, found {len(rows)}")
        table = np.array([r.split()[: len(names)] for r in rows], dtype=np.float64).reshape(count, len(names))
        cols = [names.index(c) for c in "xyz"]
        # round to the declared property type, as a binary file would store it
        pts = np.column_stack([table[:, i].astype(props[i][1]) for i in cols]).astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    return pts
