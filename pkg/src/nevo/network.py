"""Network specification, flat parameter vectors, and the forward /
loss / backward triple.

A network is a pipeline of layers over NCHW (or flat) batches.  All
parameters live in one flat vector ``theta``; the layout (per-layer
slices, weights then bias, in layer order) is a pure function of the
spec, so optimizers that only see flat vectors stay compatible with
gradient training on the same spec.

``loss`` and the loss value returned by ``backward`` share one code
path and are bitwise equal for identical inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .rng import RngStream
from . import tensor


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Pool:
    kind: str
    size: int
    stride: int


@dataclass(frozen=True)
class Activation:
    kind: str


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv, Pool, Activation, Flatten]


@dataclass(frozen=True)
class NetworkSpec:
    """Immutable architecture description.

    input_shape is (channels, height, width) for image inputs or
    (features,) for flat inputs.  Construction validates the whole
    wiring, so a NetworkSpec that exists is runnable.
    """

    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list:
        """Activation shape after the input and after every layer."""
        shape = self.input_shape
        if len(shape) not in (1, 3) or any(v < 1 for v in shape):
            raise ShapeMismatchError(f"bad input shape {shape}")
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _layer_shape(layer, shape, i)
            out.append(shape)
        if len(shape) != 1:
            raise ShapeMismatchError(
                f"network must end with a flat logits layer, got {shape}")
        return out

    @property
    def n_classes(self) -> int:
        return self.shapes()[-1][0]

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                layers.append({"kind": "dense", "in": layer.in_features,
                               "out": layer.out_features})
            elif isinstance(layer, Conv):
                layers.append({"kind": "conv", "in": layer.in_channels,
                               "out": layer.out_channels, "kernel": layer.kernel,
                               "stride": layer.stride, "pad": layer.pad})
            elif isinstance(layer, Pool):
                layers.append({"kind": "pool", "op": layer.kind,
                               "size": layer.size, "stride": layer.stride})
            elif isinstance(layer, Activation):
                layers.append({"kind": "act", "fn": layer.kind})
            else:
                layers.append({"kind": "flatten"})
        return {"input_shape": list(self.input_shape), "layers": layers}

    @staticmethod
    def from_json(doc: dict, base: str = "/model") -> "NetworkSpec":
        if not isinstance(doc, dict):
            raise ConfigError(base, "model spec must be an object")
        unknown = set(doc) - {"input_shape", "layers"}
        if unknown:
            raise ConfigError(f"{base}/{sorted(unknown)[0]}", "unknown key")
        shape = doc.get("input_shape")
        if (not isinstance(shape, list) or
                not all(isinstance(v, int) and not isinstance(v, bool) for v in shape)):
            raise ConfigError(f"{base}/input_shape", "expected a list of ints")
        raw = doc.get("layers")
        if not isinstance(raw, list):
            raise ConfigError(f"{base}/layers", "expected a list")
        layers = [_layer_from_json(entry, f"{base}/layers/{i}")
                  for i, entry in enumerate(raw)]
        try:
            return NetworkSpec(tuple(shape), tuple(layers))
        except ShapeMismatchError as exc:
            raise ConfigError(base, str(exc)) from exc


def _layer_shape(layer, shape, i):
    where = f"layer {i} ({type(layer).__name__.lower()})"
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeMismatchError(f"{where}: needs flat input, got {shape}")
        if shape[0] != layer.in_features:
            raise ShapeMismatchError(
                f"{where}: expects {layer.in_features} features, got {shape[0]}")
        return (layer.out_features,)
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ShapeMismatchError(f"{where}: needs CHW input, got {shape}")
        c, h, w = shape
        if c != layer.in_channels:
            raise ShapeMismatchError(
                f"{where}: expects {layer.in_channels} channels, got {c}")
        try:
            oh, ow = tensor._conv_out_dims(h, w, layer.kernel, layer.kernel,
                                           layer.stride, layer.pad)
        except ShapeMismatchError as exc:
            raise ShapeMismatchError(f"{where}: {exc}") from exc
        return (layer.out_channels, oh, ow)
    if isinstance(layer, Pool):
        if len(shape) != 3:
            raise ShapeMismatchError(f"{where}: needs CHW input, got {shape}")
        if layer.kind not in ("max", "avg"):
            raise ShapeMismatchError(f"{where}: unknown pool op {layer.kind!r}")
        c, h, w = shape
        if layer.size > h or layer.size > w:
            raise ShapeMismatchError(
                f"{where}: window {layer.size} larger than input {h}x{w}")
        oh = (h - layer.size) // layer.stride + 1
        ow = (w - layer.size) // layer.stride + 1
        return (c, oh, ow)
    if isinstance(layer, Activation):
        if layer.kind not in ("relu", "tanh"):
            raise ShapeMismatchError(f"{where}: unknown activation {layer.kind!r}")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ShapeMismatchError(f"{where}: unsupported layer type")


_LAYER_KEYS = {
    "dense": {"kind", "in", "out"},
    "conv": {"kind", "in", "out", "kernel", "stride", "pad"},
    "pool": {"kind", "op", "size", "stride"},
    "act": {"kind", "fn"},
    "flatten": {"kind"},
}


def _layer_from_json(entry, base):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ConfigError(base, "layer must be an object with a 'kind' key")
    kind = entry["kind"]
    if kind not in _LAYER_KEYS:
        raise ConfigError(f"{base}/kind", f"unknown layer kind {kind!r}")
    unknown = set(entry) - _LAYER_KEYS[kind]
    if unknown:
        raise ConfigError(f"{base}/{sorted(unknown)[0]}", "unknown key")

    def intval(key, default=None, minimum=1):
        if key not in entry:
            if default is None:
                raise ConfigError(f"{base}/{key}", "missing required key")
            return default
        v = entry[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
            raise ConfigError(f"{base}/{key}", f"expected an int >= {minimum}")
        return v

    if kind == "dense":
        return Dense(intval("in"), intval("out"))
    if kind == "conv":
        return Conv(intval("in"), intval("out"), intval("kernel"),
                    intval("stride", 1), intval("pad", 0, minimum=0))
    if kind == "pool":
        op = entry.get("op")
        if op not in ("max", "avg"):
            raise ConfigError(f"{base}/op", "expected 'max' or 'avg'")
        return Pool(op, intval("size"), intval("stride"))
    if kind == "act":
        fn = entry.get("fn")
        if fn not in ("relu", "tanh"):
            raise ConfigError(f"{base}/fn", "expected 'relu' or 'tanh'")
        return Activation(fn)
    return Flatten()


def _param_shapes(layer):
    """(weight shape, bias shape) for a parameterized layer, else None."""
    if isinstance(layer, Dense):
        return (layer.in_features, layer.out_features), (layer.out_features,)
    if isinstance(layer, Conv):
        return ((layer.out_channels, layer.in_channels, layer.kernel,
                 layer.kernel), (layer.out_channels,))
    return None


@dataclass(frozen=True)
class ParamSlot:
    layer_index: int
    name: str
    start: int
    stop: int
    shape: tuple


def layout(spec: NetworkSpec) -> tuple:
    """Flat-vector slots in layer order, weights before bias."""
    slots = []
    offset = 0
    for i, layer in enumerate(spec.layers):
        shapes = _param_shapes(layer)
        if shapes is None:
            continue
        for name, shape in zip(("w", "b"), shapes):
            size = int(np.prod(shape))
            slots.append(ParamSlot(i, name, offset, offset + size, shape))
            offset += size
    return tuple(slots)


def param_count(spec: NetworkSpec) -> int:
    slots = layout(spec)
    return slots[-1].stop if slots else 0


def activation_sizes(spec: NetworkSpec) -> list:
    """Element counts of the input and of the output of every
    parameterized layer; the flat-vector update cost scales with their
    sum while gradient training scales with products of neighbours."""
    shapes = spec.shapes()
    sizes = [int(np.prod(shapes[0]))]
    for i, layer in enumerate(spec.layers):
        if _param_shapes(layer) is not None:
            sizes.append(int(np.prod(shapes[i + 1])))
    return sizes


def _check_theta(spec, theta):
    d = param_count(spec)
    if theta.ndim != 1 or theta.shape[0] != d:
        raise ShapeMismatchError(
            f"parameter vector has shape {tuple(theta.shape)}, spec needs ({d},)")


def init_params(spec: NetworkSpec, stream: RngStream,
                dtype=np.float32) -> np.ndarray:
    """He-uniform fan-in weights (limit sqrt(6/fan_in)), zero biases.

    Draws are float64 and cast once at the end, so the draw sequence is
    independent of the requested dtype.
    """
    gen = stream.generator()
    theta = np.zeros(param_count(spec), dtype=np.float64)
    for slot in layout(spec):
        if slot.name != "w":
            continue
        layer = spec.layers[slot.layer_index]
        if isinstance(layer, Dense):
            fan_in = layer.in_features
        else:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
        limit = math.sqrt(6.0 / fan_in)
        theta[slot.start:slot.stop] = gen.uniform(-limit, limit, slot.stop - slot.start)
    return theta.astype(dtype)


def _views(spec, theta):
    """Per-layer {name: view} dicts; views alias theta."""
    out = {}
    for slot in layout(spec):
        out.setdefault(slot.layer_index, {})[slot.name] = \
            theta[slot.start:slot.stop].reshape(slot.shape)
    return out


def _run(spec, theta, x, counter, keep):
    """Shared forward pass; optionally records per-layer caches."""
    _check_theta(spec, theta)
    x = np.asarray(x)
    if x.shape[1:] != spec.input_shape:
        raise ShapeMismatchError(
            f"batch shape {tuple(x.shape)} does not match input shape "
            f"{spec.input_shape}")
    params = _views(spec, theta)
    caches = []
    for i, layer in enumerate(spec.layers):
        cache = None
        if isinstance(layer, Dense):
            cache = x
            w, b = params[i]["w"], params[i]["b"]
            x = tensor.matmul(x, w, counter) + b
            if counter is not None:
                counter.add_bias_adds(x.size)
        elif isinstance(layer, Conv):
            cache = x
            x = tensor.conv2d(x, params[i]["w"], params[i]["b"],
                              layer.stride, layer.pad, counter)
        elif isinstance(layer, Pool):
            shape = x.shape
            x, idx = tensor.pool2d(x, layer.kind, layer.size, layer.stride, counter)
            cache = (shape, idx)
        elif isinstance(layer, Activation):
            cache = x
            x = tensor.activate(x, layer.kind, "value", counter)
        else:
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        if keep:
            caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray,
            counter=None) -> np.ndarray:
    """Logits for a batch."""
    logits, _ = _run(spec, theta, x, counter, keep=False)
    return logits


def _l2_penalty(spec, theta):
    """Sum of squared weights (biases excluded), accumulated slot by slot."""
    total = 0.0
    for slot in layout(spec):
        if slot.name == "w":
            seg = theta[slot.start:slot.stop]
            total += float(np.dot(seg, seg))
    return total


def _total_loss(spec, theta, ce, lam):
    if lam == 0.0:
        return ce
    return ce + lam * _l2_penalty(spec, theta)


def loss(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
         lam: float = 0.0, counter=None) -> float:
    """Mean cross-entropy plus lam * sum(w^2) over weights only."""
    logits, _ = _run(spec, theta, x, counter, keep=False)
    ce, _, _ = tensor.softmax_ce(logits, y, counter)
    return _total_loss(spec, theta, ce, lam)


def backward(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray,
             y: np.ndarray, lam: float = 0.0, counter=None):
    """(loss, dloss/dtheta) via reverse accumulation.

    The returned loss is bitwise identical to loss() on the same inputs.
    """
    logits, caches = _run(spec, theta, x, counter, keep=True)
    ce, _, g = tensor.softmax_ce(logits, y, counter)
    total = _total_loss(spec, theta, ce, lam)

    params = _views(spec, theta)
    grad = np.zeros_like(theta)
    gviews = _views(spec, grad)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            w = params[i]["w"]
            gviews[i]["w"][...] = cache.T @ g
            gviews[i]["b"][...] = g.sum(axis=0)
            if counter is not None:
                counter.add_madds(2 * cache.shape[0] * w.shape[0] * w.shape[1])
            g = g @ w.T
        elif isinstance(layer, Conv):
            dx, dw, db = tensor.conv2d_backward(cache, params[i]["w"],
                                                layer.stride, layer.pad, g,
                                                counter)
            gviews[i]["w"][...] = dw
            gviews[i]["b"][...] = db
            g = dx
        elif isinstance(layer, Pool):
            shape, idx = cache
            g = tensor.pool2d_backward(g, shape, layer.kind, layer.size,
                                       layer.stride, idx)
        elif isinstance(layer, Activation):
            g = g * tensor.activate(cache, layer.kind, "derivative")
        else:
            g = g.reshape(cache)
    if lam != 0.0:
        for slot in layout(spec):
            if slot.name == "w":
                seg = slice(slot.start, slot.stop)
                grad[seg] += (2.0 * lam) * theta[seg]
    return total, grad


def predict(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray,
            counter=None) -> np.ndarray:
    """Argmax class per sample."""
    return forward(spec, theta, x, counter).argmax(axis=1)


def _mlp():
    return NetworkSpec((1, 28, 28), (
        Flatten(),
        Dense(784, 128),
        Activation("relu"),
        Dense(128, 10),
    ))


def _lenet1():
    return NetworkSpec((1, 28, 28), (
        Conv(1, 4, 5),
        Activation("relu"),
        Pool("max", 2, 2),
        Conv(4, 12, 5),
        Activation("relu"),
        Pool("max", 2, 2),
        Flatten(),
        Dense(192, 10),
    ))


def _lenet5():
    return NetworkSpec((3, 32, 32), (
        Conv(3, 6, 5),
        Activation("relu"),
        Pool("max", 2, 2),
        Conv(6, 16, 5),
        Activation("relu"),
        Pool("max", 2, 2),
        Flatten(),
        Dense(400, 120),
        Activation("relu"),
        Dense(120, 84),
        Activation("relu"),
        Dense(84, 10),
    ))


# Pinned architectures; parameter counts are load-bearing (3246 and
# 62006 for the two convolutional nets, 101770 for the MLP) and are
# locked by tests.
MODEL_ZOO = {
    "mlp": _mlp,
    "lenet1": _lenet1,
    "lenet5": _lenet5,
}


def zoo_spec(name: str) -> NetworkSpec:
    if name not in MODEL_ZOO:
        raise ConfigError("/model/name",
                          f"unknown model {name!r}; available: "
                          f"{', '.join(sorted(MODEL_ZOO))}")
    return MODEL_ZOO[name]()
