"""Small 1D CNN in numpy: forward pass with cached activations, exact
backpropagation, mini-batch gradient descent and JSON checkpoints.

Every layer works on batches: ``(N, channels, length)`` for convolution and
pooling, ``(N, features)`` for dense layers. Public helpers also accept a
single unbatched sample.
"""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError, ShapeError

N_CLASSES = 3


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = ""
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x, y, grad_out):
        """Return ``(grad_in, param_grads)`` given the cached input/output."""
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class _Affine(Layer):
    """Shared machinery for layers of the form ``y = apply(x, W) + b``."""

    use_bias: bool

    def apply(self, x, weight):
        raise NotImplementedError

    def apply_transpose(self, g, weight):
        """Adjoint of ``apply`` in its input argument."""
        raise NotImplementedError

    def forward(self, x):
        y = self.apply(x, self.params["weight"])
        b = self.params["bias"]
        return y + b.reshape((1, -1) + (1,) * (y.ndim - 2))


class Conv1D(_Affine):
    kind = "conv1d"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 use_bias=True, weight=None, bias=None):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1 or padding < 0:
            raise ValueError("invalid Conv1D dimensions")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        w = np.zeros((out_channels, in_channels, kernel_size)) if weight is None else weight
        b = np.zeros(out_channels) if bias is None else bias
        self.params = {"weight": np.array(w, dtype=np.float64), "bias": np.array(b, dtype=np.float64)}
        if self.params["weight"].shape != (out_channels, in_channels, kernel_size):
            raise ShapeError(f"conv1d weight shape {self.params['weight'].shape} "
                             f"!= {(out_channels, in_channels, kernel_size)}")
        if self.params["bias"].shape != (out_channels,):
            raise ShapeError(f"conv1d bias shape {self.params['bias'].shape} != {(out_channels,)}")

    def init(self, rng):
        k = self.kernel_size
        self.params["weight"] = _glorot(rng, self.params["weight"].shape,
                                        self.in_channels * k, self.out_channels * k)
        self.params["bias"] = np.zeros(self.out_channels)

    def out_length(self, length):
        return (length + 2 * self.padding - self.kernel_size) // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != self.in_channels:
            raise ShapeError(f"{self!r} expects (channels={self.in_channels}, length), got {in_shape}")
        n = self.out_length(in_shape[1])
        if n < 1:
            raise ShapeError(f"{self!r}: input length {in_shape[1]} shorter than kernel")
        return (self.out_channels, n)

    def _windows(self, x):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        return sliding_window_view(xp, self.kernel_size, axis=2)[:, :, ::self.stride, :]

    def apply(self, x, weight):
        win = self._windows(x)  # (N, Cin, Lout, K)
        return np.tensordot(win, weight, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def apply_transpose(self, g, weight, length=None):
        n, _, lout = g.shape
        if length is None:
            length = (lout - 1) * self.stride + self.kernel_size - 2 * self.padding
        s, p = self.stride, self.padding
        cols = np.tensordot(g, weight, axes=([1], [0]))  # (N, Lout, Cin, K)
        xp = np.zeros((n, self.in_channels, length + 2 * p))
        span = s * (lout - 1) + 1
        for k in range(self.kernel_size):
            xp[:, :, k:k + span:s] += cols[:, :, :, k].transpose(0, 2, 1)
        return xp[:, :, p:p + length]

    def backward(self, x, y, grad_out):
        win = self._windows(x)
        grads = {"weight": np.tensordot(grad_out, win, axes=([0, 2], [0, 2])),
                 "bias": grad_out.sum(axis=(0, 2)) if self.use_bias else np.zeros(self.out_channels)}
        return self.apply_transpose(grad_out, self.params["weight"], x.shape[2]), grads

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel_size": self.kernel_size, "stride": self.stride,
                "padding": self.padding, "use_bias": self.use_bias}


class Dense(_Affine):
    kind = "dense"

    def __init__(self, in_features, out_features, use_bias=True, weight=None, bias=None):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ValueError("invalid Dense dimensions")
        self.in_features = in_features
        self.out_features = out_features
        self.use_bias = use_bias
        w = np.zeros((out_features, in_features)) if weight is None else weight
        b = np.zeros(out_features) if bias is None else bias
        self.params = {"weight": np.array(w, dtype=np.float64), "bias": np.array(b, dtype=np.float64)}
        if self.params["weight"].shape != (out_features, in_features):
            raise ShapeError(f"dense weight shape {self.params['weight'].shape} "
                             f"!= {(out_features, in_features)}")
        if self.params["bias"].shape != (out_features,):
            raise ShapeError(f"dense bias shape {self.params['bias'].shape} != {(out_features,)}")

    def init(self, rng):
        self.params["weight"] = _glorot(rng, self.params["weight"].shape,
                                        self.in_features, self.out_features)
        self.params["bias"] = np.zeros(self.out_features)

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"{self!r} expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def apply(self, x, weight):
        return x @ weight.T

    def apply_transpose(self, g, weight, length=None):
        return g @ weight

    def backward(self, x, y, grad_out):
        grads = {"weight": grad_out.T @ x,
                 "bias": grad_out.sum(axis=0) if self.use_bias else np.zeros(self.out_features)}
        return grad_out @ self.params["weight"], grads

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "use_bias": self.use_bias}


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, y, grad_out):
        return grad_out * (x > 0), {}


class MaxPool1D(Layer):
    kind = "maxpool1d"

    def __init__(self, window=2, stride=2):
        super().__init__()
        if window < 1 or stride < 1:
            raise ValueError("invalid MaxPool1D dimensions")
        self.window = window
        self.stride = stride

    def output_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeError(f"{self!r} expects (channels, length), got {in_shape}")
        n = (in_shape[1] - self.window) // self.stride + 1
        if n < 1:
            raise ShapeError(f"{self!r}: input length {in_shape[1]} shorter than window")
        return (in_shape[0], n)

    def argmax(self, x):
        """Offset of the winning element within each window (first on ties)."""
        win = sliding_window_view(x, self.window, axis=2)[:, :, ::self.stride, :]
        return np.argmax(win, axis=-1)

    def forward(self, x):
        win = sliding_window_view(x, self.window, axis=2)[:, :, ::self.stride, :]
        return win.max(axis=-1)

    def route(self, x, values):
        """Send ``values`` (pooled-shape) back to the argmax input positions."""
        idx = self.argmax(x)
        out = np.zeros_like(x)
        lout = idx.shape[2]
        span = self.stride * (lout - 1) + 1
        for w in range(self.window):
            out[:, :, w:w + span:self.stride] += np.where(idx == w, values, 0.0)
        return out

    def backward(self, x, y, grad_out):
        return self.route(x, grad_out), {}

    def config(self):
        return {"window": self.window, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, y, grad_out):
        return grad_out.reshape(x.shape), {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv1D, Dense, ReLU, MaxPool1D, Flatten)}


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple[int, ...]
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ShapeError("final layer must be Dense")
        if shape != (self.n_classes,):
            raise ShapeError(f"network emits {shape}, expected ({self.n_classes},) logits")

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameters(self):
        """``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                if name == "bias" and not layer.use_bias:
                    continue
                yield i, name, layer.params[name]

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "n_classes": self.n_classes,
                "layers": [{"type": l.kind, **l.config(),
                            **{k: _encode_array(v) for k, v in sorted(l.params.items())}}
                           for l in self.layers]}

    @classmethod
    def from_dict(cls, d) -> "Network":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            if kind not in LAYER_TYPES:
                raise ValueError(f"unknown layer type {kind!r}")
            for key in ("weight", "bias"):
                if key in spec:
                    spec[key] = _decode_array(spec[key])
            layers.append(LAYER_TYPES[kind](**spec))
        return cls(layers, tuple(d["input_shape"]), d.get("n_classes", N_CLASSES))


def default_network(in_channels=6, length=100, seed=0, use_bias=True, n_classes=N_CLASSES,
                    hidden=(16, 32), dense_units=64):
    """Conv(5)-ReLU-Pool twice, then Dense-ReLU-Dense to the class logits."""
    c1, c2 = hidden
    after = (length // 2) // 2
    layers = [
        Conv1D(in_channels, c1, 5, 1, 2, use_bias), ReLU(), MaxPool1D(2, 2),
        Conv1D(c1, c2, 5, 1, 2, use_bias), ReLU(), MaxPool1D(2, 2),
        Flatten(),
        Dense(c2 * after, dense_units, use_bias), ReLU(),
        Dense(dense_units, n_classes, use_bias),
    ]
    net = Network(layers, (in_channels, length), n_classes)
    init_network(net, seed)
    return net


def init_network(net: Network, seed: int) -> Network:
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, _Affine):
            layer.init(rng)
    return net


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Trace:
    """Per-layer inputs of one forward pass; ``inputs[i]`` feeds layer ``i``."""

    inputs: list[np.ndarray]
    output: np.ndarray
    batched: bool = True

    @property
    def logits(self) -> np.ndarray:
        return self.output if self.batched else self.output[0]

    def sample(self, n: int) -> "Trace":
        return Trace([a[n:n + 1] for a in self.inputs], self.output[n:n + 1], False)


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], False
    if x.shape[1:] == net.input_shape:
        return x, True
    raise ShapeError(f"layer 0 ({net.layers[0].kind}): input shape {x.shape} does not match "
                     f"{net.input_shape} or (N, *{net.input_shape})")


def forward(net: Network, x) -> Trace:
    """Run the network and keep every layer's input for backprop and LRP."""
    a, batched = _as_batch(net, x)
    inputs = []
    for layer in net.layers:
        inputs.append(a)
        a = layer.forward(a)
    return Trace(inputs, a, batched)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss ``-log softmax(logits)[label]`` and its gradient w.r.t. logits.

    With batched logits ``(N, C)`` and labels ``(N,)`` the mean loss is
    returned and the gradient is scaled by ``1/N``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - log_norm
    if logits.ndim == 1:
        grad = np.exp(logp)
        grad[label] -= 1.0
        return float(-logp[label]), grad
    label = np.asarray(label, dtype=np.int64)
    n = logits.shape[0]
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, label] -= 1.0
    return float(-logp[rows, label].mean()), grad / n


def backward(net: Network, trace: Trace, logits_grad) -> list[dict[str, np.ndarray]]:
    """Parameter gradients for every layer (empty dict for parameter-free layers)."""
    g = np.asarray(logits_grad, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    grads: list[dict] = [{} for _ in net.layers]
    outputs = trace.inputs[1:] + [trace.output]
    for i in range(len(net.layers) - 1, -1, -1):
        g, grads[i] = net.layers[i].backward(trace.inputs[i], outputs[i], g)
    return grads


def predict(net: Network, x):
    """``(class, probabilities)``; class is the first argmax of the logits."""
    logits = forward(net, x).logits
    return np.argmax(logits, axis=-1), softmax(logits)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    init: str = "glorot_uniform"

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning rate must be a finite number >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.init != "glorot_uniform":
            raise ValueError(f"unsupported init rule {self.init!r}")


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)


def train(net: Network, samples, labels, config: TrainConfig) -> tuple[Network, TrainHistory]:
    """Mini-batch gradient descent on a copy of ``net``.

    Samples are reshuffled every epoch from ``config.seed``. Raises
    :class:`DivergenceError` as soon as a batch loss is non-finite.
    """
    x = np.asarray(samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim == len(net.input_shape):
        x = x[None]
        y = y.reshape(1)
    if x.shape[0] < 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need matching, non-empty samples/labels, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0].kind}): samples shaped {x.shape[1:]}, "
                         f"network expects {net.input_shape}")
    net = net.copy()
    rng = np.random.default_rng(config.seed)
    hist = TrainHistory()
    n = x.shape[0]
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                trace = forward(net, x[idx])
                loss, g = softmax_cross_entropy(trace.output, y[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * len(idx)
            if lr == 0:
                continue
            for layer, grads in zip(net.layers, backward(net, trace, g)):
                for name, grad in grads.items():
                    if name == "bias" and not layer.use_bias:
                        continue
                    layer.params[name] -= lr * grad
        hist.epochs.append(epoch)
        hist.loss.append(total / n)
    return net, hist


# --------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64-le",
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d) -> np.ndarray:
    if isinstance(d, dict):
        if d.get("dtype", "float64-le") != "float64-le":
            raise ValueError(f"unsupported array dtype {d['dtype']!r}")
        raw = base64.b64decode(d["data"])
        return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)
    return np.asarray(d, dtype=np.float64)


CHECKPOINT_FORMAT = "gaitlrp-model"


def save_model(net: Network, path, metadata: dict | None = None) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "version": 1, "network": net.to_dict(),
           "metadata": metadata or {}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple[Network, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return Network.from_dict(doc["network"]), doc.get("metadata", {})


def parameter_vector(net: Network) -> np.ndarray:
    return np.concatenate([p.ravel() for _, _, p in net.parameters()])


def layer_shapes(net: Network) -> Sequence[tuple[int, ...]]:
    shapes = [net.input_shape]
    for layer in net.layers:
        shapes.append(layer.output_shape(shapes[-1]))
    return shapes
