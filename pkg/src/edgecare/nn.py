"""Minimal dense-tensor CNN engine.

Layers are plain :class:`LayerSpec` records; parameters live in ``Model.params``
(trainable) and ``Model.buffers`` (batchnorm running statistics). All arithmetic
is float64 numpy. Backprop is hand-written per layer kind for a fixed layer
sequence.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "batchnorm", "relu", "maxpool2d", "globalavgpool", "dense")

# hyperparameters each kind must carry, with defaults (None = required)
_HPARAMS: dict[str, dict[str, object]] = {
    "conv2d": {"in_channels": None, "out_channels": None, "kernel_h": 3, "kernel_w": 3,
               "stride": 1, "padding": 0},
    "batchnorm": {"num_features": None, "epsilon": 1e-5, "momentum": 0.1},
    "relu": {},
    "maxpool2d": {"kernel": 2, "stride": 2},
    "globalavgpool": {},
    "dense": {"in_features": None, "out_features": None},
}

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    """Input shape incompatible with a layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer {layer!r}: {message}")
        self.layer = layer


@dataclass
class LayerSpec:
    kind: str
    name: str
    block_id: int = 0
    hparams: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _HPARAMS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.block_id < 0:
            raise ValueError("block_id must be non-negative")
        merged = {}
        for key, default in _HPARAMS[self.kind].items():
            value = self.hparams.get(key, default)
            if value is None:
                raise ValueError(f"{self.kind} layer {self.name!r} needs {key!r}")
            merged[key] = value
        extra = set(self.hparams) - set(merged)
        if extra:
            raise ValueError(f"unexpected hyperparameters for {self.kind}: {sorted(extra)}")
        self.hparams = merged

    def __getitem__(self, key):
        return self.hparams[key]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "block_id": self.block_id,
                "hparams": dict(self.hparams)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(kind=d["kind"], name=d["name"], block_id=int(d.get("block_id", 0)),
                   hparams=dict(d.get("hparams", {})))


def param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes of a layer, in serialization order."""
    if spec.kind == "conv2d":
        return {"weight": (spec["out_channels"], spec["in_channels"], spec["kernel_h"], spec["kernel_w"]),
                "bias": (spec["out_channels"],)}
    if spec.kind == "batchnorm":
        n = spec["num_features"]
        return {"gamma": (n,), "beta": (n,)}
    if spec.kind == "dense":
        return {"weight": (spec["out_features"], spec["in_features"]), "bias": (spec["out_features"],)}
    return {}


def buffer_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "batchnorm":
        n = spec["num_features"]
        return {"running_mean": (n,), "running_var": (n,)}
    return {}


class Model:
    """An ordered layer stack with its parameters.

    ``params[name][pname]`` are trainable tensors, ``buffers[name][bname]`` hold
    batchnorm running statistics.
    """

    def __init__(self, layers: Iterable[LayerSpec], params=None, buffers=None, label_space=None):
        self.layers = list(layers)
        self.label_space = list(label_space) if label_space is not None else None
        if not self.layers:
            raise ValueError("model needs at least one layer")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if self.layers[-1].kind != "dense":
            raise ValueError("final layer must be dense (the class head)")
        self.params: dict[str, dict[str, np.ndarray]] = params if params is not None else {}
        self.buffers: dict[str, dict[str, np.ndarray]] = buffers if buffers is not None else {}
        for spec in self.layers:
            for pname, shape in param_shapes(spec).items():
                arr = self.params.setdefault(spec.name, {}).setdefault(pname, np.zeros(shape))
                if arr.shape != shape:
                    raise ValueError(f"{spec.name}.{pname} has shape {arr.shape}, expected {shape}")
            for bname, shape in buffer_shapes(spec).items():
                default = np.ones(shape) if bname == "running_var" else np.zeros(shape)
                self.buffers.setdefault(spec.name, {}).setdefault(bname, default)

    @property
    def num_classes(self) -> int:
        return self.layers[-1]["out_features"]

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def parametrized_layers(self) -> list[str]:
        return [l.name for l in self.layers if param_shapes(l)]

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def state_arrays(self):
        """Yield (layer, slot, array) over params then buffers, in architecture order."""
        for spec in self.layers:
            for pname in param_shapes(spec):
                yield spec.name, pname, self.params[spec.name][pname]
            for bname in buffer_shapes(spec):
                yield spec.name, bname, self.buffers[spec.name][bname]


def init_model(layers: Iterable[LayerSpec], rng: np.random.Generator) -> Model:
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    model = Model(layers)
    for spec in model.layers:
        p = model.params.get(spec.name)
        if spec.kind == "conv2d":
            rf = spec["kernel_h"] * spec["kernel_w"]
            p["weight"] = _glorot(rng, p["weight"].shape, spec["in_channels"] * rf, spec["out_channels"] * rf)
        elif spec.kind == "dense":
            p["weight"] = _glorot(rng, p["weight"].shape, spec["in_features"], spec["out_features"])
        elif spec.kind == "batchnorm":
            p["gamma"] = np.ones_like(p["gamma"])
    return model


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sequential(specs: list[dict]) -> list[LayerSpec]:
    return [LayerSpec.from_dict(s) for s in specs]


# ---------------------------------------------------------------- layer kernels

def _conv_cols(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return cols, (b, c, ho, wo), x.shape


def _conv_forward(spec, p, x):
    kh, kw, s, pad = spec["kernel_h"], spec["kernel_w"], spec["stride"], spec["padding"]
    if x.ndim != 4 or x.shape[1] != spec["in_channels"]:
        raise ShapeError(spec.name, f"expected [B, {spec['in_channels']}, H, W], got {list(x.shape)}")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(spec.name, f"input {list(x.shape)} smaller than kernel")
    cols, (b, _, ho, wo), padded_shape = _conv_cols(x, kh, kw, s, pad)
    wmat = p["weight"].reshape(spec["out_channels"], -1)
    out = cols @ wmat.T + p["bias"]
    out = out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, padded_shape, ho, wo)


def _conv_backward(spec, p, cache, dout):
    cols, padded_shape, ho, wo = cache
    kh, kw, s, pad = spec["kernel_h"], spec["kernel_w"], spec["stride"], spec["padding"]
    cout = spec["out_channels"]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    grads = {"weight": (dmat.T @ cols).reshape(p["weight"].shape), "bias": dmat.sum(axis=0)}
    dcols = (dmat @ p["weight"].reshape(cout, -1)).reshape(padded_shape[0], ho, wo, -1, kh, kw)
    dx = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, grads


def _bn_axes(x):
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _bn_view(v, ndim):
    return v if ndim == 2 else v[None, :, None, None]


def _bn_forward(spec, p, buf, x, batch_stats):
    if x.ndim not in (2, 4) or x.shape[1] != spec["num_features"]:
        raise ShapeError(spec.name, f"expected {spec['num_features']} features, got {list(x.shape)}")
    eps = spec["epsilon"]
    axes = _bn_axes(x)
    if batch_stats:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mean, var = buf["running_mean"], buf["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)
    out = _bn_view(p["gamma"], x.ndim) * xhat + _bn_view(p["beta"], x.ndim)
    n = x.size // x.shape[1]
    return out, (xhat, inv_std, batch_stats, mean, var, n)


def _bn_backward(spec, p, cache, dout):
    xhat, inv_std, batch_stats, _, _, n = cache
    axes = _bn_axes(dout)
    nd = dout.ndim
    grads = {"gamma": (dout * xhat).sum(axis=axes), "beta": dout.sum(axis=axes)}
    dxhat = dout * _bn_view(p["gamma"], nd)
    if not batch_stats:
        return dxhat * _bn_view(inv_std, nd), grads
    dx = (_bn_view(inv_std / n, nd)
          * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
             - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)))
    return dx, grads


def _maxpool_forward(spec, x):
    k, s = spec["kernel"], spec["stride"]
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(spec.name, f"expected [B, C, H>={k}, W>={k}], got {list(x.shape)}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, ho, wo)


def _maxpool_backward(spec, cache, dout):
    shape, arg, ho, wo = cache
    k, s = spec["kernel"], spec["stride"]
    dx = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            mask = arg == i * k + j
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * mask
    return dx


def _dense_forward(spec, p, x):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != spec["in_features"]:
        raise ShapeError(spec.name, f"expected {spec['in_features']} input features, got {flat.shape[1]}")
    return flat @ p["weight"].T + p["bias"], (flat, x.shape)


# ---------------------------------------------------------------- passes

def _run_forward(model: Model, batch, training: bool, frozen: frozenset, layers=None):
    x = np.asarray(batch, dtype=np.float64)
    layers = model.layers if layers is None else layers
    if x.ndim < 2:
        raise ShapeError(layers[0].name, f"batch must have a leading batch axis, got {list(x.shape)}")
    caches = []
    for spec in layers:
        p = model.params.get(spec.name, {})
        if spec.kind == "conv2d":
            x, cache = _conv_forward(spec, p, x)
        elif spec.kind == "batchnorm":
            use_batch = training and spec.name not in frozen
            x, cache = _bn_forward(spec, p, model.buffers[spec.name], x, use_batch)
        elif spec.kind == "relu":
            cache = x > 0
            x = x * cache
        elif spec.kind == "maxpool2d":
            x, cache = _maxpool_forward(spec, x)
        elif spec.kind == "globalavgpool":
            if x.ndim != 4:
                raise ShapeError(spec.name, f"expected [B, C, H, W], got {list(x.shape)}")
            cache = x.shape
            x = x.mean(axis=(2, 3))
        else:
            x, cache = _dense_forward(spec, p, x)
        caches.append(cache)
    return x, caches


def forward(model: Model, batch, training: bool = False, frozen=()) -> np.ndarray:
    """Logits ``[B, num_classes]``.

    In training mode batchnorm layers normalise with batch statistics, except
    those named in ``frozen`` which keep using their running statistics.
    Running statistics are never updated here.
    """
    logits, _ = _run_forward(model, batch, training, frozenset(frozen))
    return logits


def forward_layers(model: Model, layers, batch) -> np.ndarray:
    """Eval-mode output of a contiguous run of ``model``'s layers."""
    out, _ = _run_forward(model, batch, False, frozenset(), layers)
    return out


def softmax(logits) -> np.ndarray:
    """Softmax along the last axis, max-shifted for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(pred, label: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= label < pred.shape[-1]:
        raise ValueError(f"label {label} out of range [0, {pred.shape[-1]})")
    return 0.0 - float(np.log(max(pred[label], LOG_CLAMP)))  # 0.0 - x keeps a perfect score at +0.0


def mean_loss(probs: np.ndarray, labels) -> float:
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = np.maximum(probs[np.arange(len(labels)), labels], LOG_CLAMP)
    return float(-np.log(picked).mean())


def _check_labels(labels, batch_size, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch_size,):
        raise ValueError(f"expected {batch_size} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def logits_grad(probs: np.ndarray, labels) -> np.ndarray:
    """d(mean CE)/d(logits) = (softmax - onehot) / B."""
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


@dataclass
class StepResult:
    loss: float
    correct: int
    grads: dict
    batch_stats: dict


def _backprop(model, batch, labels, frozen, stop_at=None):
    logits, caches = _run_forward(model, batch, True, frozen)
    probs = softmax(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    loss = mean_loss(probs, labels)
    correct = int((probs.argmax(axis=1) == labels).sum())
    dx = logits_grad(probs, labels)
    grads: dict[str, dict[str, np.ndarray]] = {}
    stats = {}
    for spec, cache in zip(reversed(model.layers), reversed(caches)):
        p = model.params.get(spec.name, {})
        if spec.kind == "dense":
            flat, in_shape = cache
            grads[spec.name] = {"weight": dx.T @ flat, "bias": dx.sum(axis=0)}
            dx = (dx @ p["weight"]).reshape(in_shape)
        elif spec.kind == "conv2d":
            dx, grads[spec.name] = _conv_backward(spec, p, cache, dx)
        elif spec.kind == "batchnorm":
            if cache[2]:
                stats[spec.name] = (cache[3], cache[4], cache[5])
            dx, grads[spec.name] = _bn_backward(spec, p, cache, dx)
        elif spec.kind == "relu":
            dx = dx * cache
        elif spec.kind == "maxpool2d":
            dx = _maxpool_backward(spec, cache, dx)
        else:
            b, c, h, w = cache
            dx = np.broadcast_to(dx[:, :, None, None] / (h * w), cache).copy()
        if spec.name == stop_at:
            break
    return StepResult(loss, correct, grads, stats)


def backward(model: Model, batch, labels, frozen=()) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of the mean batch cross-entropy for every parameter tensor.

    Runs a training-mode forward pass (see :func:`forward` for ``frozen``).
    """
    return _backprop(model, batch, labels, frozenset(frozen)).grads


def sgd_step(model: Model, gradients, learning_rate: float, trainable_mask) -> None:
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    known = set(model.layer_names())
    unknown = set(trainable_mask) - known
    if unknown:
        raise KeyError(f"unknown layer(s) in trainable mask: {sorted(unknown)}")
    for name in trainable_mask:
        for pname, g in gradients.get(name, {}).items():
            model.params[name][pname] -= learning_rate * g


def update_running_stats(model: Model, batch_stats: dict) -> None:
    for name, (mean, var, n) in batch_stats.items():
        buf = model.buffers[name]
        m = model.layer(name)["momentum"]
        unbiased = var * n / max(n - 1, 1)
        buf["running_mean"] = (1 - m) * buf["running_mean"] + m * mean
        buf["running_var"] = (1 - m) * buf["running_var"] + m * unbiased


def train_step(model: Model, batch, labels, learning_rate: float, trainable_mask) -> StepResult:
    """One SGD step on the batch; layers outside ``trainable_mask`` are untouched.

    Batchnorm layers outside the mask run on running statistics, so frozen
    layers stay bitwise constant (buffers included).
    """
    trainable = set(trainable_mask)
    frozen = frozenset(set(model.layer_names()) - trainable)
    stop = None
    for spec in model.layers:
        if spec.name in trainable and param_shapes(spec):
            stop = spec.name
            break
    result = _backprop(model, batch, labels, frozen, stop_at=stop)
    sgd_step(model, result.grads, learning_rate, trainable & set(result.grads))
    update_running_stats(model, {k: v for k, v in result.batch_stats.items() if k in trainable})
    return result


def predict_proba(model: Model, frames, batch_size: int = 256) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    out = [softmax(forward(model, frames[i:i + batch_size])) for i in range(0, len(frames), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def count_parameters(model: Model) -> dict:
    """Per-layer trainable counts, batchnorm running-stat counts and the total."""
    per_layer = {}
    running = {}
    for spec in model.layers:
        per_layer[spec.name] = sum(int(np.prod(s)) for s in param_shapes(spec).values())
        if spec.kind == "batchnorm":
            running[spec.name] = 2 * spec["num_features"]
    return {"per_layer": per_layer, "non_trainable": running, "total": sum(per_layer.values())}
