"""Minimal numpy CNN kernel: layers, forward/backward, softmax cross-entropy, SGD.

Arrays are plain ``numpy.ndarray``. Images are NCHW, fully connected activations
are (N, features). Convolution is cross-correlation (the kernel is not flipped).
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Inconsistent layer/input shapes."""


class StaleTraceError(ValueError):
    """Trace was produced by another network or before a parameter update."""


# --------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    in_channels: Optional[int] = None


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2
    stride: Optional[int] = None  # defaults to size

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.size)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FullyConnected:
    out_features: int
    in_features: Optional[int] = None


LayerSpec = Union[Conv2D, ReLU, MaxPool, Flatten, FullyConnected]
PARAMETRIC = (Conv2D, FullyConnected)


def output_shape(layer: LayerSpec, shape: tuple, index: int = 0) -> tuple:
    """Per-sample output shape of ``layer`` for per-sample input ``shape``."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ShapeError(f"layer {index} (Conv2D): expected (C, H, W) input, got {shape}")
        c, h, w = shape
        if layer.in_channels is not None and layer.in_channels != c:
            raise ShapeError(f"layer {index} (Conv2D): expected {layer.in_channels} channels, got {c}")
        if layer.stride < 1 or layer.pad < 0:
            raise ShapeError(f"layer {index} (Conv2D): stride must be >= 1 and pad >= 0")
        ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {index} (Conv2D): kernel {layer.kernel} larger than input {shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"layer {index} (MaxPool): expected (C, H, W) input, got {shape}")
        c, h, w = shape
        s = layer.stride or layer.size
        ho, wo = (h - layer.size) // s + 1, (w - layer.size) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {index} (MaxPool): window {layer.size} larger than input {shape}")
        return (c, ho, wo)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, FullyConnected):
        if len(shape) != 1:
            raise ShapeError(f"layer {index} (FullyConnected): expected flat input, got {shape}")
        if layer.in_features is not None and layer.in_features != shape[0]:
            raise ShapeError(
                f"layer {index} (FullyConnected): expected {layer.in_features} inputs, got {shape[0]}"
            )
        return (layer.out_features,)
    raise TypeError(f"unknown layer spec {layer!r}")


def resolve_spec(spec: Sequence[LayerSpec], input_shape: tuple) -> tuple[list, list]:
    """Fill in input sizes along ``spec``; returns (resolved layers, per-layer shapes)."""
    shapes = [tuple(input_shape)]
    layers = []
    for i, layer in enumerate(spec):
        if isinstance(layer, Conv2D) and layer.in_channels is None:
            layer = replace(layer, in_channels=shapes[-1][0] if len(shapes[-1]) == 3 else -1)
        elif isinstance(layer, FullyConnected) and layer.in_features is None:
            layer = replace(layer, in_features=shapes[-1][0] if len(shapes[-1]) == 1 else -1)
        shapes.append(output_shape(layer, shapes[-1], i))
        layers.append(layer)
    return layers, shapes


def param_shapes(layer: LayerSpec) -> Optional[dict]:
    if isinstance(layer, Conv2D):
        return {"W": (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
                "b": (layer.out_channels,)}
    if isinstance(layer, FullyConnected):
        return {"W": (layer.out_features, layer.in_features), "b": (layer.out_features,)}
    return None


_TOKEN = re.compile(r"^(conv|relu|pool|flatten|fc)((?::\d+)*)$")


def parse_layers(text: str) -> list:
    """Parse ``"conv:8:5, relu, pool:2, flatten, fc:64, relu, fc:10"``.

    conv:OUT:K[:STRIDE[:PAD]], pool:SIZE[:STRIDE], fc:OUT.
    """
    layers = []
    for raw in text.replace("\n", ",").split(","):
        tok = raw.strip().lower()
        if not tok:
            continue
        m = _TOKEN.match(tok)
        if not m:
            raise ValueError(f"bad layer token {raw.strip()!r}")
        kind, args = m.group(1), [int(a) for a in m.group(2).split(":")[1:]]
        try:
            if kind == "conv":
                layers.append(Conv2D(*args))
            elif kind == "pool":
                layers.append(MaxPool(*args))
            elif kind == "fc":
                (out,) = args
                layers.append(FullyConnected(out))
            elif args:
                raise TypeError
            else:
                layers.append(ReLU() if kind == "relu" else Flatten())
        except (TypeError, ValueError):
            raise ValueError(f"bad arguments in layer token {raw.strip()!r}") from None
    return layers


def format_layers(spec: Sequence[LayerSpec]) -> str:
    parts = []
    for layer in spec:
        if isinstance(layer, Conv2D):
            parts.append(f"conv:{layer.out_channels}:{layer.kernel}:{layer.stride}:{layer.pad}")
        elif isinstance(layer, MaxPool):
            parts.append(f"pool:{layer.size}:{layer.stride or layer.size}")
        elif isinstance(layer, FullyConnected):
            parts.append(f"fc:{layer.out_features}")
        elif isinstance(layer, ReLU):
            parts.append("relu")
        else:
            parts.append("flatten")
    return ",".join(parts)


# --------------------------------------------------------------------------- network


def init_params(layer: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Optional[dict]:
    """Uniform He-style init, bound sqrt(6 / fan_in); zero bias."""
    shapes = param_shapes(layer)
    if shapes is None:
        return None
    fan_in = int(np.prod(shapes["W"][1:]))
    bound = np.sqrt(6.0 / fan_in)
    return {"W": rng.uniform(-bound, bound, size=shapes["W"]).astype(dtype),
            "b": np.zeros(shapes["b"], dtype=dtype)}


@dataclass
class Network:
    """Layer list plus parameters.

    ``params[i]`` is ``{"W", "b"}`` for Conv2D/FullyConnected and ``None`` otherwise.
    Parameter dicts may be shared by reference between networks (shared prefix);
    shared layers are always frozen so nothing writes through them.
    """

    spec: list
    input_shape: tuple
    params: list
    frozen: list
    dtype: type = np.float32
    shapes: list = field(default_factory=list)
    version: int = 0
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.spec, self.shapes = resolve_spec(self.spec, tuple(self.input_shape))
        self.input_shape = tuple(self.input_shape)
        if len(self.params) != len(self.spec) or len(self.frozen) != len(self.spec):
            raise ShapeError("params/frozen must have one entry per layer")
        for i, (layer, p) in enumerate(zip(self.spec, self.params)):
            expected = param_shapes(layer)
            if expected is None:
                if p is not None:
                    raise ShapeError(f"layer {i}: {type(layer).__name__} takes no parameters")
                continue
            for key, shape in expected.items():
                if p is None or tuple(p[key].shape) != shape:
                    got = None if p is None else tuple(p[key].shape)
                    raise ShapeError(f"layer {i} param {key}: expected {shape}, got {got}")

    @classmethod
    def build(cls, spec, input_shape, seed=0, dtype=np.float32) -> "Network":
        layers, _ = resolve_spec(spec, tuple(input_shape))
        params = [init_params(layer, np.random.default_rng([seed, i]), dtype)
                  for i, layer in enumerate(layers)]
        return cls(layers, tuple(input_shape), params, [False] * len(layers), dtype)

    def __len__(self):
        return len(self.spec)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def n_params(self, start: int = 0, stop: Optional[int] = None) -> int:
        total = 0
        for p in self.params[start:stop]:
            if p is not None:
                total += p["W"].size + p["b"].size
        return total

    def astype(self, dtype) -> "Network":
        params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()}
                  for p in self.params]
        return Network(list(self.spec), self.input_shape, params, list(self.frozen), dtype)

    def copy(self) -> "Network":
        """Deep copy (breaks any sharing)."""
        return Network(list(self.spec), self.input_shape, copy.deepcopy(self.params),
                       list(self.frozen), self.dtype)


# --------------------------------------------------------------------------- primitives


def _im2col(x, kernel, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel * kernel)
    return cols, (n, c, ho, wo), x.shape


def conv2d(x, weights, bias, stride=1, pad=0):
    """Cross-correlation of NCHW ``x`` with (O, C, k, k) ``weights``."""
    if x.ndim != 4 or weights.ndim != 4 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weights {weights.shape}")
    if weights.shape[2] != weights.shape[3]:
        raise ShapeError("conv2d: only square kernels are supported")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    out, _ = _conv_forward(x, weights, bias, stride, pad)
    return out


def _conv_forward(x, w, b, stride, pad):
    k = w.shape[2]
    cols, (n, _, ho, wo), padded_shape = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(n, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, padded_shape)


def _conv_backward(dy, w, cache, stride, pad):
    cols, padded_shape = cache
    n, o, ho, wo = dy.shape
    k = w.shape[2]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(o, -1)).reshape(n, ho, wo, w.shape[1], k, k)
    dx = np.zeros(padded_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dw, db


def _pool_forward(x, size, stride):
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(win.shape[:4] + (size * size,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dy, arg, x_shape, size, stride):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[2:]
    for i in range(size):
        for j in range(size):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                np.where(arg == i * size + j, dy, 0)
    return dx


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Loss and gradient w.r.t. logits.

    A 1-D ``logits`` with a scalar label gives that sample's loss and
    ``softmax - onehot``. A batch (N, K) gives the mean loss and the gradient
    of the mean.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= z.shape[1])):
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / z.shape[0]


# --------------------------------------------------------------------------- passes


@dataclass
class Trace:
    """Per-layer activations (``acts[0]`` is the input) plus backward caches."""

    acts: list
    caches: list
    network_id: int
    version: int
    start: int = 0


def forward(net: Network, x, start: int = 0, stop: Optional[int] = None, keep: bool = True) -> Trace:
    """Run layers ``start:stop``. With ``keep=False`` no backward caches are stored."""
    stop = len(net) if stop is None else stop
    x = np.asarray(x, dtype=net.dtype)
    expected = net.shapes[start]
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeError(f"layer {start}: expected input (N, {', '.join(map(str, expected))}), got {x.shape}")
    acts, caches = [x], []
    for i in range(start, stop):
        layer, p = net.spec[i], net.params[i]
        cache = None
        if isinstance(layer, Conv2D):
            x, cache = _conv_forward(x, p["W"], p["b"], layer.stride, layer.pad)
            if not keep:
                cache = None
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(x, layer.size, layer.stride or layer.size)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        else:
            x = x @ p["W"].T + p["b"]
        acts.append(x)
        caches.append(cache if keep else None)
    return Trace(acts, caches, id(net), net.version, start)


def run(net: Network, x, start: int = 0, stop: Optional[int] = None, batch_size: int = 512):
    """Inference-only forward returning the output of layer ``stop - 1``."""
    x = np.asarray(x, dtype=net.dtype)
    if len(x) <= batch_size:
        return forward(net, x, start, stop, keep=False).acts[-1]
    return np.concatenate([forward(net, x[i:i + batch_size], start, stop, keep=False).acts[-1]
                           for i in range(0, len(x), batch_size)])


@dataclass
class Gradients:
    params: list
    input: np.ndarray


def backward(net: Network, trace: Trace, loss_grad) -> Gradients:
    """Backpropagate ``loss_grad`` (gradient w.r.t. the trace's last activation).

    Frozen layers still receive gradients; freezing is applied by ``sgd_step``.
    """
    if trace.network_id != id(net) or trace.version != net.version:
        raise StaleTraceError("trace does not belong to the current state of this network")
    if any(c is None and isinstance(net.spec[trace.start + i], (Conv2D, MaxPool))
           for i, c in enumerate(trace.caches)):
        raise StaleTraceError("trace was recorded without backward caches")
    dy = np.asarray(loss_grad, dtype=net.dtype)
    if dy.shape != trace.acts[-1].shape:
        raise ShapeError(f"loss_grad shape {dy.shape} != output shape {trace.acts[-1].shape}")
    stop = trace.start + len(trace.caches)
    grads: list = [None] * len(net)
    for i in range(stop - 1, trace.start - 1, -1):
        layer, p = net.spec[i], net.params[i]
        x = trace.acts[i - trace.start]
        cache = trace.caches[i - trace.start]
        if isinstance(layer, Conv2D):
            dy, dw, db = _conv_backward(dy, p["W"], cache, layer.stride, layer.pad)
            grads[i] = {"W": dw, "b": db}
        elif isinstance(layer, ReLU):
            dy = dy * (x > 0)
        elif isinstance(layer, MaxPool):
            dy = _pool_backward(dy, cache, x.shape, layer.size, layer.stride or layer.size)
        elif isinstance(layer, Flatten):
            dy = dy.reshape(x.shape)
        else:
            grads[i] = {"W": dy.T @ x, "b": dy.sum(axis=0)}
            dy = dy @ p["W"]
    return Gradients(grads, dy)


def sgd_step(net: Network, grads: Gradients, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> Network:
    """In-place momentum SGD with L2 decay: ``v = m*v + g + wd*w; w -= lr*v``.

    Frozen layers are skipped entirely.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if len(grads.params) != len(net):
        raise ShapeError(f"{len(grads.params)} gradient entries for {len(net)} layers")
    for i, (p, g) in enumerate(zip(net.params, grads.params)):
        if p is None or g is None or net.frozen[i]:
            continue
        for key in ("W", "b"):
            if g[key].shape != p[key].shape:
                raise ShapeError(f"layer {i} grad {key}: {g[key].shape} != {p[key].shape}")
            step = g[key] + weight_decay * p[key] if weight_decay else g[key]
            if momentum:
                v = net.velocity.get((i, key))
                step = step if v is None else momentum * v + step
                net.velocity[(i, key)] = step
            p[key] -= (lr * step).astype(net.dtype, copy=False)
    net.version += 1
    return net


# --------------------------------------------------------------------------- gradcheck


def numeric_gradient(f, array, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + eps
        hi = f()
        array[idx] = old - eps
        lo = f()
        array[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(net: Network, x, labels, eps=1e-5) -> float:
    """Max relative error between backprop and central differences (params and input)."""
    if net.dtype != np.float64:
        raise TypeError("gradcheck needs a float64 network")
    x = np.array(x, dtype=np.float64)

    def loss():
        return softmax_cross_entropy(forward(net, x, keep=False).acts[-1], labels)[0]

    trace = forward(net, x)
    _, dlogits = softmax_cross_entropy(trace.acts[-1], labels)
    grads = backward(net, trace, dlogits)
    worst = float(relative_error(grads.input, numeric_gradient(loss, x, eps)).max())
    for p, g in zip(net.params, grads.params):
        if p is None:
            continue
        for key in ("W", "b"):
            worst = max(worst, float(relative_error(g[key], numeric_gradient(loss, p[key], eps)).max()))
    return worst


def random_small_net(rng: np.random.Generator, max_params: int = 200) -> tuple:
    """A random net of at most three parametric-or-not layers and <= ``max_params`` params,
    with a matching random batch and labels. Used by the gradient-check suite."""
    while True:
        kind = rng.integers(3)
        if kind == 0:
            c, h = int(rng.integers(1, 3)), int(rng.integers(4, 7))
            k = int(rng.integers(2, 4))
            spec = [Conv2D(int(rng.integers(1, 4)), k, int(rng.integers(1, 3)), int(rng.integers(0, 2))),
                    ReLU() if rng.random() < 0.5 else MaxPool(2), Flatten()]
            shape = (c, h, h)
        elif kind == 1:
            c, h = int(rng.integers(1, 3)), int(rng.integers(4, 7))
            spec = [Conv2D(int(rng.integers(1, 3)), int(rng.integers(2, 4))), Flatten(),
                    FullyConnected(int(rng.integers(2, 5)))]
            shape = (c, h, h)
        else:
            d = int(rng.integers(2, 9))
            spec = [FullyConnected(int(rng.integers(2, 9))), ReLU(), FullyConnected(int(rng.integers(2, 5)))]
            shape = (d,)
        try:
            net = Network.build(spec, shape, seed=int(rng.integers(2**31)), dtype=np.float64)
        except ShapeError:
            continue
        if net.n_params() > max_params or net.output_shape[0] < 2:
            continue
        for p in net.params:
            if p is not None:
                p["b"][...] = rng.normal(0, 0.1, p["b"].shape)
        batch = int(rng.integers(1, 4))
        x = rng.normal(size=(batch,) + shape)
        labels = rng.integers(0, net.output_shape[0], size=batch)
        return net, x, labels
