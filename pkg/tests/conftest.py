import math

import numpy as np
import pytest

from fedmr import nn

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# independent oracles


def scalar_forward(model: nn.LayeredModel, x) -> list:
    """Plain-Python forward pass, one sample at a time, no numpy arithmetic.

    Handles dense/relu/softmax on vectors and conv2d/maxpool2d/flatten on
    nested lists shaped (C, H, W).
    """
    out = x.tolist() if hasattr(x, "tolist") else x
    for layer in model.layers:
        h = layer.hyper
        if layer.kind == "dense":
            w = layer.params["weight"].tolist()
            b = layer.params["bias"].tolist()
            out = [sum(w[o][i] * out[i] for i in range(len(out))) + b[o] for o in range(len(b))]
        elif layer.kind == "relu":
            out = _map_nested(out, lambda v: v if v > 0 else 0.0)
        elif layer.kind == "softmax":
            m = max(out)
            e = [math.exp(v - m) for v in out]
            s = sum(e)
            out = [v / s for v in e]
        elif layer.kind == "flatten":
            out = _flatten(out)
        elif layer.kind == "conv2d":
            w = layer.params["weight"].tolist()
            b = layer.params["bias"].tolist()
            k, s, p = h["kernel"], h["stride"], h["padding"]
            C, H, W = len(out), len(out[0]), len(out[0][0])

            def at(c, i, j):
                i -= p
                j -= p
                return out[c][i][j] if 0 <= i < H and 0 <= j < W else 0.0

            Ho, Wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
            out = [
                [
                    [
                        b[o]
                        + sum(
                            w[o][c][di][dj] * at(c, i * s + di, j * s + dj)
                            for c in range(C)
                            for di in range(k)
                            for dj in range(k)
                        )
                        for j in range(Wo)
                    ]
                    for i in range(Ho)
                ]
                for o in range(len(b))
            ]
        elif layer.kind == "maxpool2d":
            k, s = h["size"], h["stride"]
            H, W = len(out[0]), len(out[0][0])
            Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
            out = [
                [
                    [max(ch[i * s + di][j * s + dj] for di in range(k) for dj in range(k)) for j in range(Wo)]
                    for i in range(Ho)
                ]
                for ch in out
            ]
    return out


def _map_nested(v, f):
    return [_map_nested(x, f) for x in v] if isinstance(v, list) else f(v)


def _flatten(v):
    return [y for x in v for y in _flatten(x)] if isinstance(v, list) else [v]


def finite_difference_grads(model: nn.LayeredModel, xs, ys, eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the mean cross-entropy w.r.t. every parameter."""
    params = [p.copy() for p in model.parameters()]
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = nn.per_sample_loss(model.with_parameters(params), xs, ys).mean()
            p[idx] = orig - eps
            down = nn.per_sample_loss(model.with_parameters(params), xs, ys).mean()
            p[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# random instances


def random_mlp(rng: np.random.Generator, max_params: int = 2000):
    while True:
        d_in = int(rng.integers(2, 8))
        depth = int(rng.integers(1, 3))
        hidden = [int(rng.integers(2, 12)) for _ in range(depth)]
        classes = int(rng.integers(2, 6))
        model = nn.build_mlp(d_in, hidden, classes, rng)
        if model.num_params <= max_params:
            break
    model = _jitter_biases(model, rng)
    xs = rng.normal(size=(int(rng.integers(2, 7)), d_in))
    ys = rng.integers(classes, size=len(xs))
    return model, xs, ys


def random_cnn(rng: np.random.Generator, max_params: int = 2000):
    while True:
        side = int(rng.integers(7, 10))
        c_in = int(rng.integers(1, 3))
        model = nn.build_cnn(
            (c_in, side, side),
            int(rng.integers(2, 5)),
            channels=(int(rng.integers(2, 4)), int(rng.integers(2, 4))),
            kernel=2,
            hidden=int(rng.integers(3, 8)),
            seed=rng,
        )
        if model.num_params <= max_params:
            break
    model = _jitter_biases(model, rng)
    classes = model.layers[-2].hyper["fan_out"]
    xs = rng.normal(size=(int(rng.integers(2, 4)), c_in, side, side))
    ys = rng.integers(classes, size=len(xs))
    return model, xs, ys


def _jitter_biases(model, rng):
    # non-zero biases so their gradients are exercised
    return model.with_parameters(
        [p if p.ndim > 1 else rng.normal(scale=0.1, size=p.shape) for p in model.parameters()]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
