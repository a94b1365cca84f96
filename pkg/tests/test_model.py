import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftcloud.errors import CheckpointVersionError, ConfigError, DataError, InvalidInput
from shiftcloud.model import (
    PointNetLite,
    TrainConfig,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    forward_batch,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)


def small_net(seed, output="tanh"):
    return PointNetLite((3, 8, 12), (12, 6, 1), output_scale=2.0, input_scale=0.5, seed=seed, output=output)


def naive_forward(net, pts):
    """Point-by-point reference: per-point MLP, elementwise max, head."""
    feats = []
    for p in pts:
        a = np.asarray(p, float) * net.input_scale
        for k in range(net.n_point_layers):
            a = np.maximum(a @ net.params[2 * k] + net.params[2 * k + 1], 0)
        feats.append(a)
    g = np.max(feats, axis=0)
    k = 2 * net.n_point_layers
    n_head = len(net.head_dims) - 1
    for j in range(n_head):
        g = g @ net.params[k] + net.params[k + 1]
        if j < n_head - 1:
            g = np.maximum(g, 0)
        k += 2
    return net.output_scale * math.tanh(g[0]) if net.output == "tanh" else g[0]


def test_forward_matches_naive():
    rng = np.random.default_rng(0)
    for seed in range(5):
        net = small_net(seed)
        pts = rng.normal(scale=5, size=(30, 3))
        assert forward(net, pts) == pytest.approx(naive_forward(net, pts), abs=1e-12)


def test_gradient_check():
    """Analytic gradients against central differences, eps 1e-5."""
    t0 = time.time()
    worst = 0.0
    for seed in range(12):
        rng = np.random.default_rng(100 + seed)
        net = small_net(seed, output="tanh" if seed % 2 else "identity")
        # give the biases non-zero values so every term is exercised
        net.params = [p + rng.normal(scale=0.1, size=p.shape) for p in net.params]
        x = rng.normal(scale=4, size=(3, 7, 3))
        y = rng.normal(size=3)
        _, grads = backward(net, x, y)
        for k, p in enumerate(net.params):
            flat = p.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + 1e-5
                up = forward_batch(net, x)
                flat[i] = old - 1e-5
                down = forward_batch(net, x)
                flat[i] = old
                # L(+) - L(-) written without subtracting two nearly equal losses
                num = np.mean((up - down) * (up + down - 2 * y)) / 2e-5
                ana = grads[k].reshape(-1)[i]
                rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
                worst = max(worst, rel)
    assert worst < 1e-4
    assert time.time() - t0 < 30


def test_permutation_invariance():
    rng = np.random.default_rng(1)
    net = PointNetLite(seed=3)
    pts = rng.normal(scale=8, size=(256, 3))
    ref = forward(net, pts)
    for _ in range(100):
        assert abs(forward(net, pts[rng.permutation(256)]) - ref) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_batch_equals_single(seed, n):
    rng = np.random.default_rng(seed)
    net = small_net(seed % 7)
    x = rng.normal(scale=3, size=(4, n, 3))
    batch = forward_batch(net, x)
    assert np.allclose(batch, [forward(net, c) for c in x], atol=1e-12)
    assert np.all(np.abs(batch) <= net.output_scale)


def test_bad_inputs():
    net = small_net(0)
    with pytest.raises(InvalidInput):
        forward(net, np.zeros((0, 3)))
    with pytest.raises(InvalidInput):
        forward(net, np.array([[0, 0, np.nan]]))
    with pytest.raises(InvalidInput):
        forward_batch(net, np.zeros((2, 5, 2)))
    with pytest.raises(ConfigError):
        PointNetLite((4, 8), (8, 1))
    with pytest.raises(ConfigError):
        PointNetLite((3, 8), (9, 1))


def test_checkpoint_round_trip(tmp_path):
    net = small_net(4)
    save_checkpoint(net, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(net.params, back.params))
    assert (back.point_dims, back.head_dims, back.output_scale) == (net.point_dims, net.head_dims, 2.0)
    assert encode_checkpoint(back) == encode_checkpoint(net)


def test_checkpoint_errors():
    data = bytearray(encode_checkpoint(small_net(0)))
    bumped = data[:4] + (2).to_bytes(2, "little") + data[6:]
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(bumped))
    with pytest.raises(DataError):
        decode_checkpoint(bytes(data[:-8]))
    with pytest.raises(DataError):
        decode_checkpoint(b"XXXX" + bytes(data[4:]))
    with pytest.raises(DataError):
        decode_checkpoint(bytes(data) + b"\0")


def _toy(n, rng):
    # label is the mean x coordinate: learnable from a max-pooled feature
    x = rng.normal(size=(n, 16, 3)) + rng.uniform(-1, 1, size=(n, 1, 3))
    return x, np.clip(x[:, :, 0].mean(axis=1), -1.5, 1.5)


@pytest.mark.parametrize("opt,lr", [("sgd", 0.02), ("adam", 0.01)])
def test_training_reduces_loss(opt, lr):
    rng = np.random.default_rng(0)
    x, y = _toy(300, rng)
    net = PointNetLite((3, 32, 64), (64, 32, 1), input_scale=1.0, seed=1)
    cfg = TrainConfig(lr=lr, epochs=15, optimizer=opt, dtype="float64", clip_norm=1.0)
    out, hist = train(net, x, y, cfg)
    assert hist[-1][2] < 0.5 * np.var(y)
    assert hist[-1][1] < hist[0][1]
    assert out is not net and net.params[0] is not out.params[0]


def test_training_deterministic():
    rng = np.random.default_rng(2)
    x, y = _toy(80, rng)
    cfg = TrainConfig(lr=0.01, epochs=2, optimizer="adam")
    a, ha = train(small_net(0), x, y, cfg)
    b, hb = train(small_net(0), x, y, cfg)
    assert ha == hb and all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_adam_first_step_matches_formula():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(4, 5, 3)), rng.normal(size=4)
    net = small_net(0)
    cfg = TrainConfig(lr=0.001, epochs=1, batch_size=4, val_fraction=0.0, optimizer="adam", dtype="float64")
    out, _ = train(net, x, y, cfg)
    # first Adam step with bias correction: p - lr * g / (|g| + eps)
    _, grads = backward(net, x, y)
    for p, q, g in zip(net.params, out.params, grads):
        assert np.allclose(q, p - 0.001 * g / (np.abs(g) + 1e-8), atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_predict_matches_forward():
    rng = np.random.default_rng(4)
    net = small_net(2)
    x = rng.normal(size=(10, 9, 3))
    assert np.allclose(predict(net, x, bs=3), [forward(net, c) for c in x], atol=1e-12)


def test_convex_toy_loss_non_increasing():
    # no hidden layers, linear output: the loss is convex in the parameters
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 6, 3))
    y = x.max(axis=1) @ [0.5, -1.0, 0.25] + 0.3
    net = PointNetLite((3,), (3, 1), input_scale=1.0, seed=0, output="identity")
    cfg = TrainConfig(lr=0.05, batch_size=40, epochs=30, momentum=0.0, val_fraction=0.0, dtype="float64")
    _, hist = train(net, x, y, cfg)
    losses = [h[1] for h in hist]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.1 * losses[0]


def test_output_bounded_by_scale():
    net = PointNetLite((3, 8), (8, 1), output_scale=1.5, seed=0)
    net.params = [p * 50 for p in net.params]
    assert abs(forward(net, np.random.default_rng(0).normal(scale=100, size=(20, 3)))) <= 1.5
