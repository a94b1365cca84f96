"""Small point-feature regressor: shared per-point MLP, max-pool, MLP head,
scaled tanh output. Forward and backward passes are written out by hand."""
from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointVersionError, ConfigError, DataError, InvalidInput

MAGIC = b"PNLT"
VERSION = 1


class PointNetLite:
    """``point_dims`` chains 3 -> ... -> F, ``head_dims`` chains F -> ... -> 1.

    Hidden layers use ReLU (every per-point layer, including the one feeding
    the pool). The last head layer is linear and its output goes through
    ``output_scale * tanh`` (or is returned as is with ``output="identity"``).
    Inputs are multiplied by ``input_scale`` first.
    """

    def __init__(self, point_dims=(3, 64, 128, 256), head_dims=(256, 128, 32, 1),
                 output_scale: float = 3.0, input_scale: float = 0.1, seed=0,
                 output: str = "tanh", params=None):
        point_dims, head_dims = tuple(int(d) for d in point_dims), tuple(int(d) for d in head_dims)
        if len(point_dims) < 1 or point_dims[0] != 3:
            raise ConfigError("point layers must start at 3 input coordinates")
        if len(head_dims) < 2 or head_dims[0] != point_dims[-1] or head_dims[-1] != 1:
            raise ConfigError(f"head dims {head_dims} must run from {point_dims[-1]} to 1")
        if min(point_dims + head_dims) <= 0:
            raise ConfigError("layer widths must be positive")
        if not (output_scale > 0 and math.isfinite(output_scale)):
            raise ConfigError("output_scale must be positive")
        if not (input_scale > 0 and math.isfinite(input_scale)):
            raise ConfigError("input_scale must be positive")
        if output not in ("tanh", "identity"):
            raise ConfigError(f"unknown output {output!r}")
        self.point_dims, self.head_dims = point_dims, head_dims
        self.output_scale, self.input_scale, self.output = float(output_scale), float(input_scale), output
        shapes = self.shapes()
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            n_layers = len(shapes) // 2
            for k in range(n_layers):
                fan_in, fan_out = shapes[2 * k]
                lim = math.sqrt((3.0 if k == n_layers - 1 else 6.0) / fan_in)
                params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        params = [np.array(p, dtype=np.float64) for p in params]
        if [p.shape for p in params] != shapes:
            raise ConfigError("parameter shapes do not match layer dims")
        if not all(np.isfinite(p).all() for p in params):
            raise ConfigError("non-finite parameters")
        self.params = params

    def shapes(self) -> list[tuple]:
        out = []
        for dims in (self.point_dims, self.head_dims):
            for a, b in zip(dims[:-1], dims[1:]):
                out += [(a, b), (b,)]
        return out

    @property
    def n_point_layers(self) -> int:
        return len(self.point_dims) - 1

    @property
    def feature_width(self) -> int:
        return self.point_dims[-1]

    def copy(self) -> PointNetLite:
        return PointNetLite(self.point_dims, self.head_dims, self.output_scale, self.input_scale,
                            output=self.output, params=[p.copy() for p in self.params])

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def _check_points(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[1] == 0:
        raise InvalidInput(f"expected (batch, n, 3) points, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InvalidInput("non-finite point coordinates")
    return x


def forward_batch(net: PointNetLite, x, params=None, cache: bool = False):
    """Predictions for a (B, n, 3) batch. ``params`` overrides the net's own
    (used for reduced-precision training copies)."""
    params = net.params if params is None else params
    x = _check_points(x)
    dtype = params[0].dtype
    b, n, _ = x.shape
    a = x.reshape(b * n, 3).astype(dtype) * dtype.type(net.input_scale)
    acts = [a]
    k = 0
    for _ in range(net.n_point_layers):
        a = np.maximum(a @ params[k] + params[k + 1], 0)
        acts.append(a)
        k += 2
    h = a.reshape(b, n, -1)
    idx = np.argmax(h, axis=1)  # first maximum: lowest point index on ties
    g = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
    head = [g]
    n_head = len(net.head_dims) - 1
    for j in range(n_head):
        z = g @ params[k] + params[k + 1]
        g = np.maximum(z, 0) if j < n_head - 1 else z
        head.append(g)
        k += 2
    z = g[:, 0]
    if net.output == "tanh":
        t = np.tanh(z)
        pred = dtype.type(net.output_scale) * t
    else:
        t = None
        pred = z
    if not cache:
        return pred
    return pred, {"acts": acts, "idx": idx, "head": head, "tanh": t, "shape": (b, n)}


def forward(net: PointNetLite, cloud) -> float:
    """Prediction (meters) for a single (n, 3) cloud."""
    pts = np.asarray(cloud.points if hasattr(cloud, "points") else cloud)
    if pts.ndim != 2:
        raise InvalidInput(f"expected (n, 3) points, got shape {pts.shape}")
    return float(forward_batch(net, pts[None])[0])


def mse(pred, label) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(label, dtype=np.float64)
    return float(np.mean(d * d))


def backward(net: PointNetLite, x, labels, params=None):
    """Mean squared error over the batch and its gradient for every
    parameter, in ``net.params`` order."""
    params = net.params if params is None else params
    dtype = params[0].dtype
    pred, c = forward_batch(net, x, params, cache=True)
    y = np.asarray(labels, dtype=dtype).reshape(-1)
    if y.shape != pred.shape:
        raise InvalidInput("one label per cloud expected")
    b, n = c["shape"]
    diff = pred - y
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grads = [None] * len(params)

    dz = (2.0 / b) * diff
    if net.output == "tanh":
        dz = dz * dtype.type(net.output_scale) * (1 - c["tanh"] ** 2)
    dg = dz[:, None].astype(dtype)
    head = c["head"]
    k = len(params) - 2
    n_head = len(net.head_dims) - 1
    for j in reversed(range(n_head)):
        a_in = head[j]
        grads[k] = a_in.T @ dg
        grads[k + 1] = dg.sum(axis=0)
        dg = dg @ params[k].T
        if j > 0:
            dg = dg * (a_in > 0)
        k -= 2

    # pool: each (sample, feature) routes its gradient to one point only, so
    # the per-point layers are back-propagated through just those rows
    if net.n_point_layers == 0:
        return loss, grads
    f = net.feature_width
    flat = np.arange(b)[:, None] * n + c["idx"]
    rows, inv = np.unique(flat, return_inverse=True)
    inv = inv.reshape(b, f)
    acts = c["acts"]
    dz = np.zeros((rows.size, f), dtype=dtype)
    dz[inv, np.arange(f)[None, :]] = dg
    dz *= acts[-1][rows] > 0
    for layer in reversed(range(net.n_point_layers)):
        a_in = acts[layer][rows]
        grads[2 * layer] = a_in.T @ dz
        grads[2 * layer + 1] = dz.sum(axis=0)
        if layer > 0:
            dz = (dz @ params[2 * layer].T) * (a_in > 0)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 1.0  # multiplied into lr after every epoch
    clip_norm: float = 0.0  # rescale batch gradients above this global norm (0 = off)
    min_updates: int = 0  # run extra epochs on small datasets to reach this many steps
    dtype: str = "float32"
    optimizer: str = "sgd"  # sgd (with momentum) | adam (momentum is beta1)

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("lr, batch_size and epochs must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be sgd or adam")


def _batched_mse(net, params, x, y, bs=256) -> float:
    if len(x) == 0:
        return float("nan")
    tot = 0.0
    for s in range(0, len(x), bs):
        p = forward_batch(net, x[s:s + bs], params).astype(np.float64)
        tot += float(np.sum((p - y[s:s + bs]) ** 2))
    return tot / len(x)


def train(net: PointNetLite, clouds, labels, cfg: TrainConfig):
    """Minibatch SGD with momentum, or Adam. Returns the trained net (a new object)
    and a list of ``(epoch, train_mse, val_mse)``; ``train_mse`` is the
    mean loss over the epoch's batches as they were seen."""
    x = np.asarray(clouds)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ConfigError("empty dataset")
    _check_points(x)
    if len(y) != len(x):
        raise ConfigError("clouds and labels differ in length")
    dtype = np.dtype(cfg.dtype)
    x = x.astype(dtype)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(x))
    n_val = int(round(cfg.val_fraction * len(x)))
    if n_val >= len(x):
        n_val = len(x) - 1
    val, tr = order[:n_val], order[n_val:]
    x_val, y_val = x[val], y[val]

    epochs, decay = cfg.epochs, cfg.lr_decay
    per_epoch = math.ceil(len(tr) / cfg.batch_size)
    if epochs * per_epoch < cfg.min_updates:
        # stretch the schedule so the total lr decay stays the same
        epochs = math.ceil(cfg.min_updates / per_epoch)
        decay = cfg.lr_decay ** (cfg.epochs / epochs)

    params = [p.astype(dtype) for p in net.params]
    vel = [np.zeros_like(p) for p in params]
    sq = [np.zeros_like(p) for p in params] if cfg.optimizer == "adam" else None
    mu = dtype.type(cfg.momentum)
    beta2, eps = 0.999, 1e-8
    lr = cfg.lr
    t = 0
    history = []
    for epoch in range(1, epochs + 1):
        perm = tr[rng.permutation(len(tr))]
        tot = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            bi = perm[s:s + cfg.batch_size]
            loss, grads = backward(net, x[bi], y[bi], params)
            tot += loss * len(bi)
            step = lr
            if cfg.clip_norm > 0:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
                if norm > cfg.clip_norm:
                    step = lr * cfg.clip_norm / norm
            t += 1
            if sq is None:
                step = dtype.type(step)
                for p, v, g in zip(params, vel, grads):
                    v *= mu
                    v -= step * g
                    p += v
                continue
            scale = step / lr  # clipping factor
            c1, c2 = 1 - cfg.momentum ** t, 1 - beta2 ** t
            a = dtype.type(lr * math.sqrt(c2) / c1)
            for p, m, v, g in zip(params, vel, sq, grads):
                g = g * dtype.type(scale)
                m *= mu
                m += (1 - mu) * g
                v *= dtype.type(beta2)
                v += dtype.type(1 - beta2) * g * g
                p -= a * m / (np.sqrt(v) + dtype.type(eps * math.sqrt(c2)))
        if not all(np.isfinite(p).all() for p in params):
            raise DataError(f"training diverged in epoch {epoch}; lower the learning rate")
        history.append((epoch, tot / len(perm), _batched_mse(net, params, x_val, y_val)))
        lr *= decay
    out = net.copy()
    out.params = [p.astype(np.float64) for p in params]
    return out, history


def predict(net: PointNetLite, clouds, bs: int = 256) -> np.ndarray:
    x = np.asarray(clouds)
    return np.concatenate([forward_batch(net, x[s:s + bs]) for s in range(0, len(x), bs)])


# --- persistence -----------------------------------------------------------

def encode_checkpoint(net: PointNetLite) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, 1 if net.output == "tanh" else 0))
    buf.write(struct.pack("<II", len(net.point_dims), len(net.head_dims)))
    buf.write(struct.pack(f"<{len(net.point_dims) + len(net.head_dims)}I", *net.point_dims, *net.head_dims))
    buf.write(struct.pack("<dd", net.output_scale, net.input_scale))
    for p in net.params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes, path=None) -> PointNetLite:
    where = f"{path}: " if path else ""
    try:
        if data[:4] != MAGIC:
            raise DataError(f"{where}not a model checkpoint")
        version, flags = struct.unpack_from("<HH", data, 4)
        if version != VERSION:
            raise CheckpointVersionError(f"{where}checkpoint version {version}, this build reads {VERSION}")
        npd, nhd = struct.unpack_from("<II", data, 8)
        if npd > 64 or nhd > 64:
            raise DataError(f"{where}implausible layer count")
        dims = struct.unpack_from(f"<{npd + nhd}I", data, 16)
        off = 16 + 4 * (npd + nhd)
        out_scale, in_scale = struct.unpack_from("<dd", data, off)
        off += 16
    except struct.error as e:
        raise DataError(f"{where}truncated checkpoint header") from e
    net = PointNetLite(dims[:npd], dims[npd:], out_scale, in_scale, output="tanh" if flags & 1 else "identity")
    params = []
    for shape in net.shapes():
        size = int(np.prod(shape))
        if off + 8 * size > len(data):
            raise DataError(f"{where}truncated checkpoint parameters")
        params.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64))
        off += 8 * size
    if off != len(data):
        raise DataError(f"{where}{len(data) - off} trailing bytes in checkpoint")
    return PointNetLite(net.point_dims, net.head_dims, out_scale, in_scale, output=net.output, params=params)


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(net: PointNetLite, path) -> None:
    _atomic_write(path, encode_checkpoint(net))


def load_checkpoint(path) -> PointNetLite:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), path)


def write_history(path, history) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse"])
    for e, t, v in history:
        w.writerow([e, repr(float(t)), repr(float(v))])
    _atomic_write(path, buf.getvalue().encode())
