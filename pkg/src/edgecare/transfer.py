"""Cloud pre-training, checkpoint push, layer freezing and edge fine-tuning."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import nn
from .nn import LayerSpec, Model

log = logging.getLogger(__name__)

MAGIC = b"TLEC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_COUNT = struct.Struct("<Q")

# parameter budgets reported for the original network (cases 1-3)
PUBLISHED_BUDGET = {"case1": 1223373, "case2": 497000, "case3": 264369}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class PolicyError(ValueError):
    pass


# ---------------------------------------------------------------- architecture

def load_arch_config(path=None) -> dict:
    if path is None:
        text = resources.files("edgecare").joinpath("configs/reference_arch.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def reference_architecture(num_classes: int = 3, in_channels: int | None = None, config=None) -> list[LayerSpec]:
    """Five-block CNN: blocks 1-4 are conv-bn-relu followed by 2x2 max-pooling,
    block 5 is a stack of bn-relu-conv units, then global pooling and the head.
    """
    cfg = config if config is not None else load_arch_config()
    c_in = in_channels if in_channels is not None else cfg["in_channels"]
    k, pool = cfg["kernel"], cfg["pool"]
    bn = {"epsilon": cfg["batchnorm"]["epsilon"], "momentum": cfg["batchnorm"]["momentum"]}
    widths = cfg["widths"]
    layers: list[LayerSpec] = []

    def conv(name, block, cin, cout):
        layers.append(LayerSpec("conv2d", name, block, {
            "in_channels": cin, "out_channels": cout, "kernel_h": k, "kernel_w": k,
            "stride": 1, "padding": k // 2}))

    for b, width in enumerate(widths[:-1], start=1):
        conv(f"b{b}_conv", b, c_in, width)
        layers.append(LayerSpec("batchnorm", f"b{b}_bn", b, {"num_features": width, **bn}))
        layers.append(LayerSpec("relu", f"b{b}_relu", b))
        layers.append(LayerSpec("maxpool2d", f"b{b}_pool", b, {"kernel": pool, "stride": pool}))
        c_in = width
    last = len(widths)
    for u in range(1, cfg["block5_units"] + 1):
        layers.append(LayerSpec("batchnorm", f"b{last}_u{u}_bn", last, {"num_features": c_in, **bn}))
        layers.append(LayerSpec("relu", f"b{last}_u{u}_relu", last))
        conv(f"b{last}_u{u}_conv", last, c_in, widths[-1])
        c_in = widths[-1]
    layers.append(LayerSpec("globalavgpool", "gap", last + 1))
    layers.append(LayerSpec("dense", "head", last + 1, {"in_features": c_in, "out_features": num_classes}))
    return layers


def validate_shapes(model: Model, input_shape) -> None:
    """Raise :class:`nn.ShapeError` if the stack cannot process ``input_shape`` ([C, H, W])."""
    nn.forward(model, np.zeros((1, *input_shape)))


# ---------------------------------------------------------------- checkpoints

@dataclass
class ModelCheckpoint:
    format_version: int
    architecture: list[LayerSpec]
    weights: dict[str, np.ndarray]
    label_space: list[str]
    provenance: dict

    def to_model(self) -> Model:
        model = Model(self.architecture)
        for layer, slot, arr in list(model.state_arrays()):
            blob = self.weights[f"{layer}.{slot}"]
            store = model.params if slot in nn.param_shapes(model.layer(layer)) else model.buffers
            store[layer][slot] = blob.copy()
        model.label_space = list(self.label_space)
        return model


def _metadata(model: Model, label_space, provenance) -> dict:
    return {
        "architecture": [l.to_dict() for l in model.layers],
        "label_space": list(label_space),
        "provenance": {"trained_on": str(provenance.get("trained_on", "")),
                       "epochs": int(provenance.get("epochs", 0)),
                       "seed": int(provenance.get("seed", 0))},
        "tensors": [[layer, slot, list(arr.shape)] for layer, slot, arr in model.state_arrays()],
    }


def checkpoint_bytes(model: Model, label_space, provenance) -> bytes:
    if len(label_space) != model.num_classes:
        raise ValueError(f"label space has {len(label_space)} names, head has {model.num_classes} outputs")
    meta = json.dumps(_metadata(model, label_space, provenance), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)))
    buf.write(meta)
    for _, _, arr in model.state_arrays():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        buf.write(_COUNT.pack(flat.size))
        buf.write(flat.tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, label_space, provenance: dict, path) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    data = checkpoint_bytes(model, label_space, provenance)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tlec-", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_checkpoint(data: bytes) -> ModelCheckpoint:
    if len(data) < _HEADER.size:
        raise TruncatedBlobError("file shorter than header")
    magic, version, meta_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    pos = _HEADER.size
    if len(data) < pos + meta_len:
        raise TruncatedBlobError("metadata truncated")
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    architecture = [LayerSpec.from_dict(d) for d in meta["architecture"]]
    expected = {}
    for spec in architecture:
        for slot, shape in {**nn.param_shapes(spec), **nn.buffer_shapes(spec)}.items():
            expected[(spec.name, slot)] = shape
    weights = {}
    for layer, slot, shape in meta["tensors"]:
        shape = tuple(shape)
        if expected.get((layer, slot)) != shape:
            raise ShapeMismatchError(f"{layer}.{slot}: stored shape {shape}, architecture says "
                                     f"{expected.get((layer, slot))}")
        if len(data) < pos + _COUNT.size:
            raise TruncatedBlobError(f"{layer}.{slot}: missing element count")
        (count,) = _COUNT.unpack_from(data, pos)
        pos += _COUNT.size
        if count != int(np.prod(shape)):
            raise ShapeMismatchError(f"{layer}.{slot}: {count} elements for shape {shape}")
        end = pos + 8 * count
        if len(data) < end:
            raise TruncatedBlobError(f"{layer}.{slot}: blob truncated")
        weights[f"{layer}.{slot}"] = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    missing = {f"{l}.{s}" for l, s in expected} - set(weights)
    if missing:
        raise ShapeMismatchError(f"no blob for {sorted(missing)}")
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    label_space = meta["label_space"]
    if architecture[-1].kind != "dense" or len(label_space) != architecture[-1]["out_features"]:
        raise ShapeMismatchError("label space does not match the class head")
    return ModelCheckpoint(FORMAT_VERSION, architecture, weights, label_space, meta["provenance"])


def load_checkpoint(path) -> ModelCheckpoint:
    return parse_checkpoint(Path(path).read_bytes())


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------- freezing

@dataclass
class FreezePolicy:
    mode: str = "none"
    frozen_block_ids: frozenset = field(default_factory=frozenset)
    frozen_layer_names: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.mode not in ("none", "freeze_blocks", "freeze_layers"):
            raise PolicyError(f"unknown freeze mode {self.mode!r}")
        self.frozen_block_ids = frozenset(int(b) for b in self.frozen_block_ids)
        self.frozen_layer_names = frozenset(self.frozen_layer_names)
        if self.mode == "none" and (self.frozen_block_ids or self.frozen_layer_names):
            raise PolicyError("mode 'none' cannot list frozen blocks or layers")

    def frozen_layers(self, model: Model) -> set[str]:
        self.validate(model)
        return {l.name for l in model.layers
                if l.block_id in self.frozen_block_ids or l.name in self.frozen_layer_names}

    def trainable_mask(self, model: Model) -> set[str]:
        return set(model.layer_names()) - self.frozen_layers(model)

    def validate(self, model: Model) -> None:
        blocks = {l.block_id for l in model.layers}
        if self.frozen_block_ids - blocks:
            raise PolicyError(f"unknown block id(s) {sorted(self.frozen_block_ids - blocks)}")
        names = set(model.layer_names())
        if self.frozen_layer_names - names:
            raise PolicyError(f"unknown layer(s) {sorted(self.frozen_layer_names - names)}")
        head = model.head
        if head.block_id in self.frozen_block_ids or head.name in self.frozen_layer_names:
            raise PolicyError(f"class head {head.name!r} must stay trainable")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "frozen_block_ids": sorted(self.frozen_block_ids),
                "frozen_layer_names": sorted(self.frozen_layer_names)}

    @classmethod
    def from_dict(cls, d: dict) -> "FreezePolicy":
        return cls(d.get("mode", "none"), frozenset(d.get("frozen_block_ids", ())),
                   frozenset(d.get("frozen_layer_names", ())))


def preset_policy(name: str) -> FreezePolicy:
    """``case1`` trains everything, ``case2`` freezes blocks 1-4, ``case3`` additionally
    freezes the first bn-relu-conv unit of block 5 (reference architecture names)."""
    if name == "case1":
        return FreezePolicy("none")
    if name == "case2":
        return FreezePolicy("freeze_blocks", frozenset({1, 2, 3, 4}))
    if name == "case3":
        return FreezePolicy("freeze_blocks", frozenset({1, 2, 3, 4}),
                            frozenset({"b5_u1_bn", "b5_u1_relu", "b5_u1_conv"}))
    raise PolicyError(f"unknown preset {name!r}")


def resolve_policy(spec: str) -> FreezePolicy:
    """Preset name or path to a JSON policy document."""
    if spec in ("case1", "case2", "case3"):
        return preset_policy(spec)
    return FreezePolicy.from_dict(json.loads(Path(spec).read_text()))


@dataclass(frozen=True)
class ParameterBudget:
    total: int
    trainable: int
    frozen: int

    @property
    def trainable_fraction(self) -> float:
        return trainable_fraction(self.trainable, self.total)

    def to_dict(self) -> dict:
        return {"total": self.total, "trainable": self.trainable, "frozen": self.frozen,
                "trainable_fraction": self.trainable_fraction}


def trainable_fraction(trainable: int, total: int) -> float:
    return trainable / total if total > 0 else 0.0


def apply_freeze(model: Model, policy: FreezePolicy) -> ParameterBudget:
    frozen_layers = policy.frozen_layers(model)
    counts = nn.count_parameters(model)["per_layer"]
    frozen = sum(c for name, c in counts.items() if name in frozen_layers)
    total = sum(counts.values())
    return ParameterBudget(total=total, trainable=total - frozen, frozen=frozen)


def budget_table(model: Model, policies: dict[str, FreezePolicy]) -> list[dict]:
    rows = []
    for name, policy in policies.items():
        b = apply_freeze(model, policy)
        row = {"policy": name, **b.to_dict()}
        if name in PUBLISHED_BUDGET:
            row["published_trainable"] = PUBLISHED_BUDGET[name]
            row["published_total"] = PUBLISHED_BUDGET["case1"]
            row["published_fraction"] = trainable_fraction(PUBLISHED_BUDGET[name], PUBLISHED_BUDGET["case1"])
        rows.append(row)
    return rows


def format_budget_table(rows: list[dict]) -> str:
    lines = [f"{'policy':<10}{'total':>10}{'trainable':>11}{'frozen':>10}{'fraction':>10}"
             f"{'pub. trainable':>17}{'pub. total':>13}{'pub. frac':>12}"]
    for r in rows:
        published = (f"{r['published_trainable']:>17}{r['published_total']:>13}{r['published_fraction']:>12.4f}"
                 if "published_trainable" in r else f"{'-':>17}{'-':>13}{'-':>12}")
        lines.append(f"{r['policy']:<10}{r['total']:>10}{r['trainable']:>11}{r['frozen']:>10}"
                     f"{r['trainable_fraction']:>10.4f}{published}")
    return "\n".join(lines)


# ---------------------------------------------------------------- head realignment

def realign_head(checkpoint: ModelCheckpoint, target_classes, seed: int) -> Model:
    """Keep every pre-trained layer, swap the head for a fresh dense(in -> C')."""
    target_classes = list(target_classes)
    if len(target_classes) < 2:
        raise ValueError("need at least two target classes")
    model = checkpoint.to_model()
    old = model.head
    new = LayerSpec("dense", old.name, old.block_id,
                    {"in_features": old["in_features"], "out_features": len(target_classes)})
    model.layers[-1] = new
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (new["in_features"] + new["out_features"]))
    model.params[new.name] = {
        "weight": rng.uniform(-limit, limit, size=(new["out_features"], new["in_features"])),
        "bias": np.zeros(new["out_features"]),
    }
    model.label_space = target_classes
    return model


# ---------------------------------------------------------------- training

@dataclass
class FineTuneConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.05
    seed: int = 0
    target_classes: list = field(default_factory=list)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0, batch_size and learning_rate positive")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "seed": self.seed,
                "target_classes": list(self.target_classes)}


@dataclass
class TrainStats:
    epoch: int
    mean_loss: float
    accuracy: float
    holdout_loss: float
    holdout_accuracy: float


def evaluate_split(model: Model, frames, labels) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    probs = nn.predict_proba(model, frames)
    labels = np.asarray(labels)
    return nn.mean_loss(probs, labels), float((probs.argmax(axis=1) == labels).mean())


def _check_dataset(data, num_classes, what):
    frames, labels = data
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(frames) == 0:
        raise ValueError(f"{what} set is empty")
    if len(frames) != len(labels):
        raise ValueError(f"{what} set: {len(frames)} frames but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"{what} set: labels must lie in [0, {num_classes})")
    return frames, labels


def fine_tune(model: Model, policy: FreezePolicy, train_set, holdout_set, config: FineTuneConfig):
    """SGD on ``train_set`` for the unfrozen layers; returns the epoch snapshot with the
    lowest holdout loss, plus per-epoch stats.

    ``train_set``/``holdout_set`` are ``(frames [N, C, H, W], labels [N])`` pairs.
    """
    mask = policy.trainable_mask(model)
    frames, labels = _check_dataset(train_set, model.num_classes, "train")
    hold_x, hold_y = _check_dataset(holdout_set, model.num_classes, "holdout")
    work = model.copy()
    best, best_loss = model.copy(), None
    history: list[TrainStats] = []
    if config.epochs == 0:
        return best, history
    # the frozen prefix is a fixed function (batchnorm on running stats): run it once
    cut = _frozen_prefix_len(work, mask)
    suffix = _suffix_view(work, cut)
    if cut:
        prefix = _prefix_view(work, cut)
        frames, hold_x = _features(prefix, frames), _features(prefix, hold_x)
    rng = np.random.default_rng(config.seed)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(frames))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            step = nn.train_step(suffix, frames[idx], labels[idx], config.learning_rate, mask & set(suffix.layer_names()))
            loss_sum += step.loss * len(idx)
            correct += step.correct
        h_loss, h_acc = evaluate_split(suffix, hold_x, hold_y)
        stats = TrainStats(epoch, loss_sum / len(frames), correct / len(frames), h_loss, h_acc)
        history.append(stats)
        log.debug("epoch %d loss %.4f acc %.3f holdout %.4f/%.3f", epoch, stats.mean_loss,
                  stats.accuracy, h_loss, h_acc)
        if best_loss is None or h_loss < best_loss:
            best, best_loss = work.copy(), h_loss
    return best, history


def _frozen_prefix_len(model: Model, mask: set) -> int:
    for i, spec in enumerate(model.layers):
        if spec.name in mask and nn.param_shapes(spec):
            return i
    return len(model.layers) - 1


def _prefix_view(model: Model, cut: int):
    return model.layers[:cut], model


def _features(prefix, frames, batch_size: int = 256):
    layers, model = prefix
    out = [nn.forward_layers(model, layers, frames[i:i + batch_size])
           for i in range(0, len(frames), batch_size)]
    return np.concatenate(out)


def _suffix_view(model: Model, cut: int) -> Model:
    """Model over layers [cut:] whose parameter and buffer dicts alias ``model``'s."""
    layers = model.layers[cut:]
    names = [l.name for l in layers]
    view = Model(layers, {n: model.params[n] for n in names if n in model.params},
                 {n: model.buffers[n] for n in names if n in model.buffers}, model.label_space)
    return view


def best_epoch(history: list[TrainStats]) -> int | None:
    if not history:
        return None
    return min(history, key=lambda s: (s.holdout_loss, s.epoch)).epoch


def pretrain(layers: list[LayerSpec], label_space, train_set, holdout_set, config: FineTuneConfig):
    """Cloud-side training of a freshly initialised model with every layer trainable."""
    model = nn.init_model(layers, np.random.default_rng(config.seed))
    model.label_space = list(label_space)
    best, history = fine_tune(model, FreezePolicy("none"), train_set, holdout_set, config)
    best.label_space = list(label_space)
    return best, history
