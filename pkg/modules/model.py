"""
Dense feed-forward classifier trained with SGD and any loss from ``modules.losses``.

Models are frozen snapshots: ``sgd_step`` and ``train`` return new objects.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from main import (
    InvalidHyperparameterError,
    InvalidInputError,
    NumericError,
    write_json_atomic,
)
from modules.datagen import LabeledDataset, Provenance
from modules.losses import RobustLossConfig, batch_grad_scores, batch_loss_values, softmax_rows

LOGGER = logging.getLogger("RobustPL.Model")

CHECKPOINT_FORMAT = "robustpl-mlp"
CHECKPOINT_VERSION = 1
SHUFFLE_STREAM = 0x5348


class Activation(str, Enum):
    IDENTITY = "identity"
    RELU = "relu"

    @classmethod
    def parse(cls, value) -> "Activation":
        if isinstance(value, cls):
            return value
        key = str(value or "").strip().lower()
        for member in cls:
            if member.value == key:
                return member
        raise InvalidInputError(f"unknown activation {value!r}")


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = _frozen_array(self.weights, 2, "weights")
        b = _frozen_array(self.bias, 1, "bias")
        if b.shape[0] != w.shape[0]:
            raise InvalidInputError(f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError("layer parameters contain NaN/Inf", location="DenseLayer")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True, eq=False)
class MlpClassifier:
    layers: Tuple[DenseLayer, ...]
    hidden_activation: Activation = Activation.RELU

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInputError("a classifier needs at least one layer")
        for idx in range(1, len(layers)):
            if layers[idx].in_dim != layers[idx - 1].out_dim:
                raise InvalidInputError(
                    f"layer {idx} expects {layers[idx].in_dim} inputs but layer {idx - 1} produces {layers[idx - 1].out_dim}"
                )
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "hidden_activation", Activation.parse(self.hidden_activation))

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def layer_dims(self) -> List[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]


@dataclass(frozen=True)
class Architecture:
    """Hidden layer sizes and activation; input and output sizes come from the data."""

    hidden: Tuple[int, ...] = ()
    activation: Activation = Activation.RELU

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "activation", Activation.parse(self.activation))

    def layer_dims(self, input_dim: int, num_classes: int) -> List[int]:
        return [int(input_dim)] + list(self.hidden) + [int(num_classes)]

    def to_dict(self) -> Dict[str, object]:
        return {"hidden": list(self.hidden), "activation": self.activation.value}


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: Tuple[Tuple[int, float], ...] = ()
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        object.__setattr__(self, "momentum", float(self.momentum))
        object.__setattr__(self, "weight_decay", float(self.weight_decay))
        object.__setattr__(self, "epochs", int(self.epochs))
        object.__setattr__(self, "batch_size", int(self.batch_size))
        object.__setattr__(self, "seed", int(self.seed))
        schedule = tuple((int(e), float(r)) for e, r in self.lr_schedule)
        object.__setattr__(self, "lr_schedule", schedule)
        if not self.learning_rate > 0.0:
            raise InvalidHyperparameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidHyperparameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise InvalidHyperparameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise InvalidHyperparameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidHyperparameterError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidHyperparameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        previous = -1
        for epoch, rate in schedule:
            if epoch <= previous:
                raise InvalidHyperparameterError("lr_schedule epochs must be strictly increasing")
            if self.epochs and epoch >= self.epochs:
                raise InvalidHyperparameterError(f"lr_schedule epoch {epoch} must be < epochs ({self.epochs})")
            if not rate > 0.0:
                raise InvalidHyperparameterError(f"lr_schedule rate must be > 0, got {rate}")
            previous = epoch

    def rate_for_epoch(self, epoch: int) -> float:
        rate = self.learning_rate
        for start, new_rate in self.lr_schedule:
            if epoch >= start:
                rate = new_rate
        return rate

    def to_dict(self) -> Dict[str, object]:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_schedule": [[e, r] for e, r in self.lr_schedule],
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    accuracy: float
    learning_rate: float


@dataclass
class TrainRecord:
    epochs: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> List[float]:
        return [e.mean_loss for e in self.epochs]

    @property
    def accuracies(self) -> List[float]:
        return [e.accuracy for e in self.epochs]


@dataclass(frozen=True, eq=False)
class Gradients:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    loss: float = 0.0


@dataclass(frozen=True, eq=False)
class SgdState:
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, model: MlpClassifier) -> "SgdState":
        return cls(
            weights=tuple(np.zeros_like(layer.weights) for layer in model.layers),
            biases=tuple(np.zeros_like(layer.bias) for layer in model.layers),
        )


# ---------- Construction ----------
def init_model(layer_dims: Sequence[int], activation=Activation.RELU, seed: int = 0) -> MlpClassifier:
    dims = [int(d) for d in (layer_dims or [])]
    if len(dims) < 2:
        raise InvalidInputError(f"need at least input and output dims, got {list(layer_dims or [])}")
    if any(d <= 0 for d in dims):
        raise InvalidInputError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(int(seed))
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(DenseLayer(weights=rng.uniform(-s, s, size=(fan_out, fan_in)), bias=np.zeros(fan_out)))
    return MlpClassifier(layers=tuple(layers), hidden_activation=Activation.parse(activation))


# ---------- Inference ----------
def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _as_batch(model: MlpClassifier, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise InvalidInputError(f"features must have shape (n, {model.input_dim}), got {X.shape}")
    return X


def forward_batch(model: MlpClassifier, X) -> np.ndarray:
    h = _as_batch(model, X)
    last = len(model.layers) - 1
    for idx, layer in enumerate(model.layers):
        h = h @ layer.weights.T + layer.bias
        if idx < last:
            h = _activate(h, model.hidden_activation)
    return h


def forward(model: MlpClassifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise InvalidInputError(f"feature vector must have length {model.input_dim}, got shape {x.shape}")
    return forward_batch(model, x[None, :])[0]


def predict_batch(model: MlpClassifier, X) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(forward_batch(model, X), axis=1)


def predict(model: MlpClassifier, x) -> int:
    return int(np.argmax(forward(model, x)))


def predict_proba_batch(model: MlpClassifier, X) -> np.ndarray:
    return softmax_rows(forward_batch(model, X))


# ---------- Gradients ----------
def backward(
    model: MlpClassifier,
    features,
    labels,
    per_sample_loss: Sequence[RobustLossConfig],
) -> Gradients:
    """Gradient of the batch-mean loss; each sample uses its own loss config."""
    X = _as_batch(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise InvalidInputError("cannot backpropagate an empty batch")
    if labels.shape != (n,) or len(per_sample_loss) != n:
        raise InvalidInputError("features, labels and per-sample losses must have the same length")

    # forward pass, keeping pre-activations
    activations = [X]
    pre_acts = []
    h = X
    last = len(model.layers) - 1
    for idx, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.bias
        pre_acts.append(z)
        h = _activate(z, model.hidden_activation) if idx < last else z
        activations.append(h)
    scores = activations[-1]

    delta = np.empty_like(scores)
    losses = np.empty(n)
    probs = softmax_rows(scores)
    groups: Dict[RobustLossConfig, List[int]] = {}
    for i, cfg in enumerate(per_sample_loss):
        groups.setdefault(cfg, []).append(i)
    for cfg, idx in groups.items():
        idx_arr = np.asarray(idx)
        delta[idx_arr] = batch_grad_scores(cfg, scores[idx_arr], labels[idx_arr])
        losses[idx_arr] = batch_loss_values(cfg, probs[idx_arr], labels[idx_arr])
    delta /= n

    w_grads: List[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    b_grads: List[np.ndarray] = [None] * len(model.layers)  # type: ignore[list-item]
    for idx in range(last, -1, -1):
        layer = model.layers[idx]
        w_grads[idx] = delta.T @ activations[idx]
        b_grads[idx] = delta.sum(axis=0)
        if idx > 0:
            delta = delta @ layer.weights
            if model.hidden_activation is Activation.RELU:
                delta = delta * (pre_acts[idx - 1] > 0.0)

    for idx, (gw, gb) in enumerate(zip(w_grads, b_grads)):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericError("non-finite parameter gradient", location=f"layer {idx}")
    return Gradients(weights=tuple(w_grads), biases=tuple(b_grads), loss=float(losses.mean()))


def sgd_step(
    model: MlpClassifier,
    grads: Gradients,
    state: SgdState,
    config: SgdConfig,
    learning_rate: Optional[float] = None,
) -> Tuple[MlpClassifier, SgdState]:
    """v <- momentum * v + grad + weight_decay * w ; w <- w - lr * v."""
    lr = config.learning_rate if learning_rate is None else float(learning_rate)
    if len(grads.weights) != len(model.layers) or len(state.weights) != len(model.layers):
        raise InvalidInputError("gradient/state layer count does not match the model")
    new_layers = []
    new_vw = []
    new_vb = []
    for idx, layer in enumerate(model.layers):
        gw, gb = grads.weights[idx], grads.biases[idx]
        vw, vb = state.weights[idx], state.biases[idx]
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape or vw.shape != gw.shape or vb.shape != gb.shape:
            raise InvalidInputError(f"shape mismatch in layer {idx}")
        vw = config.momentum * vw + gw + config.weight_decay * layer.weights
        vb = config.momentum * vb + gb + config.weight_decay * layer.bias
        w = layer.weights - lr * vw
        b = layer.bias - lr * vb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError("non-finite parameter update", location=f"layer {idx}")
        new_layers.append(DenseLayer(weights=w, bias=b))
        new_vw.append(vw)
        new_vb.append(vb)
    return (
        MlpClassifier(layers=tuple(new_layers), hidden_activation=model.hidden_activation),
        SgdState(weights=tuple(new_vw), biases=tuple(new_vb)),
    )


# ---------- Training ----------
def _shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SHUFFLE_STREAM]))


def train(
    model: MlpClassifier,
    dataset: LabeledDataset,
    loss_map: Mapping[Provenance, RobustLossConfig],
    config: SgdConfig,
) -> Tuple[MlpClassifier, TrainRecord]:
    if dataset.n == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if dataset.d != model.input_dim:
        raise InvalidInputError(f"dataset has {dataset.d} features but the model expects {model.input_dim}")
    if dataset.num_classes > model.num_classes:
        raise InvalidInputError(f"dataset has {dataset.num_classes} classes but the model outputs {model.num_classes}")
    missing = sorted({p.value for p in dataset.provenance_set()} - {Provenance.parse(k).value for k in loss_map})
    if missing:
        raise InvalidInputError(f"loss_map has no entry for provenance {missing}")
    by_flag = {Provenance.parse(k): v for k, v in loss_map.items()}
    per_sample = [by_flag[Provenance(flag)] for flag in dataset.provenance]

    record = TrainRecord()
    rng = _shuffle_rng(config.seed)
    state = SgdState.zeros_like(model)
    n = dataset.n
    for epoch in range(config.epochs):
        lr = config.rate_for_epoch(epoch)
        order = rng.permutation(n)
        total_loss = 0.0
        for batch_no, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                grads = backward(model, dataset.features[idx], dataset.labels[idx], [per_sample[i] for i in idx])
                model, state = sgd_step(model, grads, state, config, learning_rate=lr)
            except NumericError as exc:
                raise NumericError(str(exc), location=f"epoch {epoch} batch {batch_no}") from exc
            total_loss += grads.loss * len(idx)
        accuracy = evaluate_accuracy(model, dataset)
        record.epochs.append(EpochRecord(epoch=epoch, mean_loss=total_loss / n, accuracy=accuracy, learning_rate=lr))
        LOGGER.debug("epoch %d: loss=%.6f acc=%.4f lr=%g", epoch, total_loss / n, accuracy, lr)
    return model, record


def evaluate_accuracy(model: MlpClassifier, dataset: LabeledDataset) -> float:
    if dataset.n == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    preds = predict_batch(model, dataset.features)
    return float(np.mean(preds == dataset.labels))


# ---------- Checkpoints ----------
def model_to_dict(model: MlpClassifier) -> Dict[str, object]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "activation": model.hidden_activation.value,
        "layer_dims": model.layer_dims,
        "layers": [{"weights": layer.weights.tolist(), "bias": layer.bias.tolist()} for layer in model.layers],
    }


def model_from_dict(data: Mapping[str, object]) -> MlpClassifier:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    if int(data.get("version", 0)) != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {data.get('version')!r}")
    layers = tuple(DenseLayer(weights=entry["weights"], bias=entry["bias"]) for entry in data.get("layers") or [])
    model = MlpClassifier(layers=layers, hidden_activation=Activation.parse(data.get("activation")))
    if list(data.get("layer_dims") or []) != model.layer_dims:
        raise InvalidInputError("checkpoint layer_dims do not match its weight shapes")
    return model


def save_checkpoint(model: MlpClassifier, path: str) -> str:
    write_json_atomic(model_to_dict(model), path, sort_keys=True)
    LOGGER.info("Checkpoint saved to %s (dims=%s)", path, model.layer_dims)
    return path


def load_checkpoint(path: str) -> MlpClassifier:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    model = model_from_dict(data)
    LOGGER.info("Checkpoint loaded from %s (dims=%s)", path, model.layer_dims)
    return model


def with_weights(model: MlpClassifier, layer_index: int, weights=None, bias=None) -> MlpClassifier:
    layers = list(model.layers)
    layer = layers[layer_index]
    layers[layer_index] = replace(
        layer,
        weights=layer.weights if weights is None else weights,
        bias=layer.bias if bias is None else bias,
    )
    return replace(model, layers=tuple(layers))
