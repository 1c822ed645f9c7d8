"""Small float64 neural-network engine with hand-written backpropagation.

Models are immutable values: a :class:`LayeredModel` is an ordered tuple of
:class:`Layer` records, each holding named numpy parameter arrays. Training
functions never modify arrays in place; they return new models.

Supported layer kinds: ``dense``, ``conv2d``, ``relu``, ``flatten``,
``maxpool2d`` and ``softmax`` (the probability output layer). Images use the
NCHW layout.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "maxpool2d", "softmax")
PARAM_NAMES = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "relu": (),
    "flatten": (),
    "maxpool2d": (),
    "softmax": (),
}
HYPER_NAMES = {
    "dense": ("fan_in", "fan_out"),
    "conv2d": ("in_channels", "out_channels", "kernel", "stride", "padding"),
    "relu": (),
    "flatten": (),
    "maxpool2d": ("size", "stride"),
    "softmax": (),
}

_EVAL_CHUNK = 1024


class ShapeMismatchError(ValueError):
    """Raised when an array does not fit the layer it is fed to."""

    def __init__(self, layer_index: int | None, message: str):
        self.layer_index = layer_index
        where = f"layer {layer_index}" if layer_index is not None else "model"
        super().__init__(f"{where}: {message}")


class ArchitectureMismatchError(ValueError):
    """Raised when models that must share an architecture do not."""

    def __init__(self, model_index: int, expected: str, got: str):
        self.model_index = model_index
        super().__init__(
            f"model {model_index} has architecture {got!r}, expected {expected!r}"
        )


class LabelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    hyper: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if set(self.params) != set(PARAM_NAMES[self.kind]):
            raise ValueError(
                f"{self.kind} layer expects params {PARAM_NAMES[self.kind]}, "
                f"got {tuple(self.params)}"
            )
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise ShapeMismatchError(
                    None,
                    f"{self.kind}.{name} has shape {self.params[name].shape}, "
                    f"expected {shape}",
                )

    @property
    def signature(self) -> str:
        names = HYPER_NAMES[self.kind]
        if not names:
            return self.kind
        inner = ",".join(f"{n}={int(self.hyper[n])}" for n in names)
        return f"{self.kind}({inner})"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return _shapes_for(self.kind, self.hyper)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Layer":
        return Layer(self.kind, dict(params), self.hyper)


@dataclass(frozen=True, eq=False)
class LayeredModel:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def architecture_id(self) -> str:
        return "|".join(layer.signature for layer in self.layers)

    @property
    def num_params(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def parameters(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in layer order, weight before bias."""
        return [
            layer.params[name]
            for layer in self.layers
            for name in PARAM_NAMES[layer.kind]
        ]

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "LayeredModel":
        """Return a copy of this model whose parameters are ``arrays``."""
        it = iter(arrays)
        layers = []
        for layer in self.layers:
            names = PARAM_NAMES[layer.kind]
            if names:
                layer = layer.with_params({n: np.asarray(next(it), DTYPE) for n in names})
            layers.append(layer)
        if next(it, None) is not None:
            raise ValueError("too many parameter arrays for this architecture")
        return LayeredModel(tuple(layers))

    def equals(self, other: "LayeredModel") -> bool:
        """Bit-exact equality of architecture and every parameter."""
        if self.architecture_id != other.architecture_id:
            return False
        return all(
            a.tobytes() == b.tobytes()
            for a, b in zip(self.parameters(), other.parameters())
        )


@dataclass(frozen=True)
class OptimizerState:
    velocity: tuple[np.ndarray, ...]
    learning_rate: float
    momentum: float

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


# ---------------------------------------------------------------------------
# construction


def dense(fan_in: int, fan_out: int, rng: np.random.Generator | None = None) -> Layer:
    hyper = {"fan_in": int(fan_in), "fan_out": int(fan_out)}
    return _init_layer("dense", hyper, rng)


def conv2d(
    in_channels: int,
    out_channels: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    rng: np.random.Generator | None = None,
) -> Layer:
    hyper = {
        "in_channels": int(in_channels),
        "out_channels": int(out_channels),
        "kernel": int(kernel),
        "stride": int(stride),
        "padding": int(padding),
    }
    return _init_layer("conv2d", hyper, rng)


def relu() -> Layer:
    return Layer("relu")


def flatten() -> Layer:
    return Layer("flatten")


def maxpool2d(size: int, stride: int | None = None) -> Layer:
    return Layer("maxpool2d", hyper={"size": int(size), "stride": int(stride or size)})


def softmax() -> Layer:
    return Layer("softmax")


def _init_layer(kind: str, hyper: dict, rng: np.random.Generator | None) -> Layer:
    # uniform He-style: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias
    shapes = _shapes_for(kind, hyper)
    w_shape = shapes["weight"]
    fan_in = int(np.prod(w_shape[1:]))
    if rng is None:
        weight = np.zeros(w_shape, DTYPE)
    else:
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=w_shape)
    return Layer(kind, {"weight": weight, "bias": np.zeros(shapes["bias"], DTYPE)}, hyper)


def _shapes_for(kind: str, hyper: Mapping[str, int]) -> dict[str, tuple[int, ...]]:
    if not PARAM_NAMES[kind]:
        return {}
    if kind == "dense":
        return {"weight": (hyper["fan_out"], hyper["fan_in"]), "bias": (hyper["fan_out"],)}
    k = hyper["kernel"]
    return {
        "weight": (hyper["out_channels"], hyper["in_channels"], k, k),
        "bias": (hyper["out_channels"],),
    }


def build_mlp(
    input_dim: int,
    hidden: Sequence[int],
    num_classes: int,
    seed: int | np.random.Generator | None = 0,
) -> LayeredModel:
    """Dense/ReLU stack ending in a softmax output layer."""
    rng = _as_rng(seed)
    layers = []
    width = input_dim
    for h in hidden:
        layers += [dense(width, h, rng), relu()]
        width = h
    layers += [dense(width, num_classes, rng), softmax()]
    return LayeredModel(tuple(layers))


def build_cnn(
    input_shape: Sequence[int],
    num_classes: int,
    channels: Sequence[int] = (8, 16),
    kernel: int = 3,
    hidden: int = 64,
    pool: int = 2,
    seed: int | np.random.Generator | None = 0,
) -> LayeredModel:
    """Two conv layers and two dense layers, each conv followed by ReLU and max-pooling."""
    rng = _as_rng(seed)
    c, h, w = (int(v) for v in input_shape)
    c1, c2 = channels
    layers = [conv2d(c, c1, kernel, rng=rng), relu(), maxpool2d(pool)]
    h, w = _pooled(_conv_out(h, kernel, 1, 0), pool, pool), _pooled(_conv_out(w, kernel, 1, 0), pool, pool)
    layers += [conv2d(c1, c2, kernel, rng=rng), relu(), maxpool2d(pool)]
    h, w = _pooled(_conv_out(h, kernel, 1, 0), pool, pool), _pooled(_conv_out(w, kernel, 1, 0), pool, pool)
    if h < 1 or w < 1:
        raise ValueError(f"input {tuple(input_shape)} too small for this CNN")
    layers += [flatten(), dense(c2 * h * w, hidden, rng), relu(), dense(hidden, num_classes, rng), softmax()]
    return LayeredModel(tuple(layers))


_SIG_RE = re.compile(r"^([a-z0-9]+)(?:\((.*)\))?$")


def model_from_architecture(architecture_id: str) -> LayeredModel:
    """Zero-initialised model with the given architecture signature."""
    layers = []
    for i, part in enumerate(architecture_id.split("|")):
        m = _SIG_RE.match(part)
        if m is None or m.group(1) not in LAYER_KINDS:
            raise ValueError(f"layer {i}: cannot parse signature {part!r}")
        kind = m.group(1)
        hyper = {}
        if m.group(2):
            for item in m.group(2).split(","):
                key, _, value = item.partition("=")
                hyper[key] = int(value)
        if set(hyper) != set(HYPER_NAMES[kind]):
            raise ValueError(f"layer {i}: {kind} needs {HYPER_NAMES[kind]}")
        shapes = _shapes_for(kind, hyper)
        layers.append(Layer(kind, {n: np.zeros(s, DTYPE) for n, s in shapes.items()}, hyper))
    return LayeredModel(tuple(layers))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _pooled(size: int, pool: int, stride: int) -> int:
    return (size - pool) // stride + 1


# ---------------------------------------------------------------------------
# per-layer forward / backward


def _layer_forward(layer: Layer, x: np.ndarray, index: int):
    kind = layer.kind
    if kind == "dense":
        w, b = layer.params["weight"], layer.params["bias"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeMismatchError(
                index, f"dense expects (batch, {w.shape[1]}), got {x.shape}"
            )
        return x @ w.T + b, x
    if kind == "relu":
        return np.maximum(x, 0.0), x
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "softmax":
        if x.ndim != 2:
            raise ShapeMismatchError(index, f"softmax expects (batch, classes), got {x.shape}")
        return _softmax(x), None
    if kind == "conv2d":
        return _conv_forward(layer, x, index)
    if kind == "maxpool2d":
        return _pool_forward(layer, x, index)
    raise AssertionError(kind)


def _layer_backward(layer: Layer, cache, dy: np.ndarray):
    kind = layer.kind
    if kind == "dense":
        x = cache
        w = layer.params["weight"]
        return dy @ w, {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
    if kind == "relu":
        return dy * (cache > 0.0), {}
    if kind == "flatten":
        return dy.reshape(cache), {}
    if kind == "conv2d":
        return _conv_backward(layer, cache, dy)
    if kind == "maxpool2d":
        return _pool_backward(layer, cache, dy)
    raise AssertionError(kind)


def _conv_forward(layer: Layer, x: np.ndarray, index: int):
    h = layer.hyper
    cin, k, s, p = h["in_channels"], h["kernel"], h["stride"], h["padding"]
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeMismatchError(index, f"conv2d expects (batch, {cin}, H, W), got {x.shape}")
    if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
        raise ShapeMismatchError(index, f"input {x.shape[2:]} smaller than kernel {k}")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    wmat = layer.params["weight"].reshape(h["out_channels"], -1)
    out = cols @ wmat.T + layer.params["bias"]
    out = out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
    return out, (cols, xp.shape, x.shape)


def _conv_backward(layer: Layer, cache, dy: np.ndarray):
    cols, padded_shape, in_shape = cache
    h = layer.hyper
    k, s, p = h["kernel"], h["stride"], h["padding"]
    weight = layer.params["weight"]
    b, o, ho, wo = dy.shape
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (dy_flat.T @ cols).reshape(weight.shape)
    dbias = dy_flat.sum(axis=0)
    dcols = (dy_flat @ weight.reshape(o, -1)).reshape(b, ho, wo, in_shape[1], k, k)
    dxp = np.zeros(padded_shape, DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + in_shape[2], p : p + in_shape[3]] if p else dxp
    return dx, {"weight": dweight, "bias": dbias}


def _pool_forward(layer: Layer, x: np.ndarray, index: int):
    k, s = layer.hyper["size"], layer.hyper["stride"]
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatchError(index, f"maxpool2d({k}) cannot pool input {x.shape}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(*win.shape[:4], k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _pool_backward(layer: Layer, cache, dy: np.ndarray):
    arg, in_shape = cache
    k, s = layer.hyper["size"], layer.hyper["stride"]
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros(in_shape, DTYPE)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dy * (arg == i * k + j)
    return dx, {}


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# public operations


def forward(model: LayeredModel, batch_x: np.ndarray) -> np.ndarray:
    """Run ``batch_x`` through every layer.

    Returns class probabilities if the model ends in a softmax layer,
    otherwise the raw output of the last layer.
    """
    out = np.asarray(batch_x, DTYPE)
    for i, layer in enumerate(model.layers):
        out, _ = _layer_forward(layer, out, i)
    return out


def _logits_with_caches(model: LayeredModel, batch_x: np.ndarray):
    layers = model.layers
    if layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    caches = []
    out = np.asarray(batch_x, DTYPE)
    for i, layer in enumerate(layers):
        out, cache = _layer_forward(layer, out, i)
        caches.append(cache)
    if out.ndim != 2:
        raise ShapeMismatchError(len(layers) - 1, f"final output must be (batch, classes), got {out.shape}")
    return out, layers, caches


def _check_labels(batch_y, num_classes: int, batch: int) -> np.ndarray:
    y = np.asarray(batch_y)
    if y.shape != (batch,):
        raise LabelError(f"expected {batch} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def per_sample_loss(model: LayeredModel, batch_x: np.ndarray, batch_y) -> np.ndarray:
    logits, _, _ = _logits_with_caches(model, batch_x)
    y = _check_labels(batch_y, logits.shape[1], logits.shape[0])
    return -_log_softmax(logits)[np.arange(len(y)), y]


def loss_and_grad(model: LayeredModel, batch_x: np.ndarray, batch_y):
    """Mean cross-entropy over the batch and its gradient.

    The gradient is a tuple of arrays aligned with ``model.parameters()``.
    """
    logits, layers, caches = _logits_with_caches(model, batch_x)
    batch = logits.shape[0]
    y = _check_labels(batch_y, logits.shape[1], batch)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(batch), y].mean())

    dout = np.exp(logp)
    dout[np.arange(batch), y] -= 1.0
    dout /= batch
    per_layer = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        dout, grads = _layer_backward(layers[i], caches[i], dout)
        per_layer[i] = grads
    flat = []
    for layer, grads in zip(model.layers, per_layer + [{}] * (len(model.layers) - len(layers))):
        flat.extend(grads[name] for name in PARAM_NAMES[layer.kind])
    return loss, tuple(flat)


def init_optimizer(model: LayeredModel, learning_rate: float, momentum: float) -> OptimizerState:
    velocity = tuple(np.zeros_like(p) for p in model.parameters())
    return OptimizerState(velocity, float(learning_rate), float(momentum))


def sgd_step(model: LayeredModel, grads: Sequence[np.ndarray], state: OptimizerState):
    """One SGD-with-momentum step: ``v = momentum*v + g; p = p - lr*v``.

    Returns ``(new_model, new_state)``; the inputs are not modified.
    """
    params = model.parameters()
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ShapeMismatchError(
            None,
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.velocity)} velocities",
        )
    new_params, new_velocity = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatchError(
                None, f"parameter {i} has shape {p.shape}, gradient {g.shape}, velocity {v.shape}"
            )
        v = state.momentum * v + g
        new_velocity.append(v)
        new_params.append(p - state.learning_rate * v)
    return model.with_parameters(new_params), OptimizerState(
        tuple(new_velocity), state.learning_rate, state.momentum
    )


def predict(model: LayeredModel, batch_x: np.ndarray) -> np.ndarray:
    logits, _, _ = _logits_with_caches(model, batch_x)
    return logits.argmax(axis=1)


def evaluate(model: LayeredModel, dataset) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of ``model`` on ``dataset`` (needs ``xs``/``ys``)."""
    xs, ys = dataset.xs, np.asarray(dataset.ys)
    n = len(ys)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    total_loss = 0.0
    for start in range(0, n, _EVAL_CHUNK):
        bx, by = xs[start : start + _EVAL_CHUNK], ys[start : start + _EVAL_CHUNK]
        logits, _, _ = _logits_with_caches(model, bx)
        y = _check_labels(by, logits.shape[1], logits.shape[0])
        correct += int((logits.argmax(axis=1) == y).sum())
        total_loss += float(-_log_softmax(logits)[np.arange(len(y)), y].sum())
    return correct / n, total_loss / n
