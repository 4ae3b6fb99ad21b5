"""
Robust loss functions on class-probability vectors.

Scalar operations take a ``ProbDist`` and a ``OneHotLabel``; the ``batch_*``
functions are the vectorised forms the model uses during training. Every loss
reads probabilities clamped to ``[EPS, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Mapping, Optional

import numpy as np

from main import InvalidHyperparameterError, InvalidInputError, NumericError

LOGGER = logging.getLogger("RobustPL.Losses")

EPS = 1e-12
SUM_TOLERANCE = 1e-9
DEFAULT_A = -2.0


class LossFamily(str, Enum):
    CE = "ce"
    GCE = "gce"
    BCE = "bce"
    RCE = "rce"
    SCE = "sce"
    MAE = "mae"

    @classmethod
    def parse(cls, value) -> "LossFamily":
        if isinstance(value, cls):
            return value
        key = str(value or "").strip().lower()
        for member in cls:
            if member.value == key:
                return member
        raise InvalidHyperparameterError(f"unknown loss family {value!r} (expected one of {[m.value for m in cls]})")


@dataclass(frozen=True, eq=False)
class ProbDist:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise InvalidInputError(f"probability vector must be 1-D and non-empty, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)):
            raise InvalidInputError("probability vector contains non-finite entries")
        if np.any(probs < 0.0):
            raise InvalidInputError("probability vector contains negative entries")
        total = float(probs.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise InvalidInputError(f"probabilities must sum to 1 within {SUM_TOLERANCE}, got {total!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def K(self) -> int:
        return int(self.probs.size)

    @property
    def clamped(self) -> np.ndarray:
        return np.clip(self.probs, EPS, 1.0)


@dataclass(frozen=True)
class OneHotLabel:
    class_index: int
    K: int

    def __post_init__(self):
        if int(self.K) < 1:
            raise InvalidInputError(f"class count must be positive, got {self.K}")
        if not 0 <= int(self.class_index) < int(self.K):
            raise InvalidInputError(f"class index {self.class_index} outside [0, {self.K})")
        object.__setattr__(self, "class_index", int(self.class_index))
        object.__setattr__(self, "K", int(self.K))

    def onehot(self) -> np.ndarray:
        out = np.zeros(self.K)
        out[self.class_index] = 1.0
        return out


@dataclass(frozen=True)
class RobustLossConfig:
    """Loss family plus its hyperparameters.

    Only the fields relevant to ``family`` are consulted. ``verbatim`` switches
    GCE and BCE to the formulas exactly as printed, which diverge as their
    exponent goes to zero; it exists for comparison runs only.
    """

    family: LossFamily = LossFamily.CE
    q_exponent: float = 0.7
    beta: float = 1.0
    A: float = DEFAULT_A
    alpha: float = 0.1
    gamma: float = 0.01
    verbatim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", LossFamily.parse(self.family))
        for name in ("q_exponent", "beta", "A", "alpha", "gamma"):
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise InvalidHyperparameterError(f"{name} must be a real number, got {value!r}") from None
            if not np.isfinite(value):
                raise InvalidHyperparameterError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        _check_q(self.q_exponent)
        _check_beta(self.beta)
        _check_A(self.A)
        if self.alpha < 0.0 or self.gamma < 0.0:
            raise InvalidHyperparameterError(f"alpha and gamma must be non-negative, got alpha={self.alpha}, gamma={self.gamma}")
        if self.family is LossFamily.SCE and self.alpha == 0.0 and self.gamma == 0.0:
            raise InvalidHyperparameterError("SCE needs alpha or gamma to be non-zero")
        object.__setattr__(self, "verbatim", bool(self.verbatim))

    @classmethod
    def cross_entropy(cls) -> "RobustLossConfig":
        return cls(family=LossFamily.CE)

    @classmethod
    def from_dict(cls, data: Mapping[str, object], defaults: Optional[Mapping[str, object]] = None) -> "RobustLossConfig":
        merged: Dict[str, object] = {}
        for key, value in (defaults or {}).items():
            if key in _CONFIG_FIELDS:
                merged[key] = value
        for key, value in data.items():
            key = "q_exponent" if key == "q" else key
            if key not in _CONFIG_FIELDS:
                raise InvalidHyperparameterError(f"unknown loss field {key!r}")
            merged[key] = value
        return cls(**merged)

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {"family": self.family.value}
        out.update(self.relevant_hyperparameters())
        if self.verbatim:
            out["verbatim"] = True
        return out

    def relevant_hyperparameters(self) -> Dict[str, float]:
        if self.family is LossFamily.GCE:
            return {"q_exponent": self.q_exponent}
        if self.family is LossFamily.BCE:
            return {"beta": self.beta}
        if self.family is LossFamily.RCE:
            return {"A": self.A}
        if self.family is LossFamily.SCE:
            return {"alpha": self.alpha, "gamma": self.gamma, "A": self.A}
        return {}

    def with_family(self, family) -> "RobustLossConfig":
        return replace(self, family=LossFamily.parse(family))

    @property
    def label(self) -> str:
        parts = [f"{k}={v:g}" for k, v in self.relevant_hyperparameters().items()]
        name = self.family.value.upper()
        return f"{name}({', '.join(parts)})" if parts else name


_CONFIG_FIELDS = {"family", "q_exponent", "beta", "A", "alpha", "gamma", "verbatim"}


def _check_q(q: float) -> None:
    if not 0.0 < q <= 1.0:
        raise InvalidHyperparameterError(f"q_exponent must lie in (0, 1], got {q!r}")


def _check_beta(beta: float) -> None:
    if not beta > 0.0:
        raise InvalidHyperparameterError(f"beta must be > 0, got {beta!r}")


def _check_A(A: float) -> None:
    if not A < 0.0:
        raise InvalidHyperparameterError(f"A must be < 0, got {A!r}")


def _check_dims(p: ProbDist, y: OneHotLabel) -> None:
    if p.K != y.K:
        raise InvalidInputError(f"dimension mismatch: probabilities have K={p.K}, label has K={y.K}")


# ---------- Softmax ----------
def softmax_rows(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise InvalidInputError("scores contain non-finite values")
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(scores) -> ProbDist:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size < 2:
        raise InvalidInputError(f"softmax needs a vector of at least 2 scores, got shape {scores.shape}")
    return ProbDist(softmax_rows(scores))


# ---------- Scalar losses ----------
def ce_loss(p: ProbDist, y: OneHotLabel) -> float:
    _check_dims(p, y)
    return float(-np.log(p.clamped[y.class_index]))


def gce_loss(p: ProbDist, y: OneHotLabel, q_exponent: float) -> float:
    _check_q(q_exponent)
    _check_dims(p, y)
    return float(_gce_values(p.clamped[None, :], np.array([y.class_index]), q_exponent)[0])


def bce_loss(p: ProbDist, y: OneHotLabel, beta: float) -> float:
    _check_beta(beta)
    _check_dims(p, y)
    return float(_bce_values(p.clamped[None, :], np.array([y.class_index]), beta)[0])


def rce_loss(p: ProbDist, y: OneHotLabel, A: float) -> float:
    _check_A(A)
    _check_dims(p, y)
    return float(-A * (1.0 - p.clamped[y.class_index]))


def mae_loss(p: ProbDist, y: OneHotLabel) -> float:
    # sum_k |p(k) - q(k)| collapses to 2 * (1 - p(y)) for a one-hot q
    _check_dims(p, y)
    return float(2.0 * (1.0 - p.clamped[y.class_index]))


def sce_loss(p: ProbDist, y: OneHotLabel, alpha: float, gamma: float, A: float = DEFAULT_A) -> float:
    if alpha < 0.0 or gamma < 0.0:
        raise InvalidHyperparameterError(f"alpha and gamma must be non-negative, got alpha={alpha}, gamma={gamma}")
    if alpha == 0.0 and gamma == 0.0:
        raise InvalidHyperparameterError("SCE needs alpha or gamma to be non-zero")
    return float(alpha * ce_loss(p, y) + gamma * rce_loss(p, y, A))


def loss_value(config: RobustLossConfig, p: ProbDist, y: OneHotLabel) -> float:
    _check_dims(p, y)
    return float(batch_loss_values(config, p.probs[None, :], np.array([y.class_index]))[0])


def loss_grad_scores(config: RobustLossConfig, scores, y: OneHotLabel) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size != y.K:
        raise InvalidInputError(f"scores must be a vector of length K={y.K}, got shape {scores.shape}")
    return batch_grad_scores(config, scores[None, :], np.array([y.class_index]))[0]


# ---------- Vectorised forms ----------
def _gce_values(pc: np.ndarray, labels: np.ndarray, q: float, verbatim: bool = False) -> np.ndarray:
    py = pc[np.arange(len(labels)), labels]
    if verbatim:
        return np.clip(1.0 - py, EPS, 1.0) ** q / q
    if q == 1.0:
        return 1.0 - py
    return -np.expm1(q * np.log(py)) / q


def _bce_values(pc: np.ndarray, labels: np.ndarray, beta: float, verbatim: bool = False) -> np.ndarray:
    py = pc[np.arange(len(labels)), labels]
    power_sum = np.sum(pc ** (beta + 1.0), axis=1)
    if verbatim:
        return ((beta + 1.0) / beta) * np.clip(1.0 - py, EPS, 1.0) ** beta + power_sum
    return -((beta + 1.0) / beta) * np.expm1(beta * np.log(py)) + power_sum


def _validate_batch(probs_or_scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if probs_or_scores.ndim != 2:
        raise InvalidInputError(f"expected a 2-D (n, K) array, got shape {probs_or_scores.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs_or_scores.shape[0],):
        raise InvalidInputError(f"labels shape {labels.shape} does not match {probs_or_scores.shape[0]} rows")
    K = probs_or_scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InvalidInputError(f"labels must lie in [0, {K})")
    return labels


def batch_loss_values(config: RobustLossConfig, probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample loss for each row of ``probs``."""
    probs = np.asarray(probs, dtype=float)
    labels = _validate_batch(probs, labels)
    pc = np.clip(probs, EPS, 1.0)
    rows = np.arange(len(labels))
    py = pc[rows, labels]
    family = config.family
    if family is LossFamily.CE:
        return -np.log(py)
    if family is LossFamily.GCE:
        return _gce_values(pc, labels, config.q_exponent, config.verbatim)
    if family is LossFamily.BCE:
        return _bce_values(pc, labels, config.beta, config.verbatim)
    if family is LossFamily.RCE:
        return -config.A * (1.0 - py)
    if family is LossFamily.MAE:
        return 2.0 * (1.0 - py)
    if family is LossFamily.SCE:
        return config.alpha * (-np.log(py)) + config.gamma * (-config.A * (1.0 - py))
    raise InvalidHyperparameterError(f"unsupported loss family {family!r}")


def _chain_through_softmax(p: np.ndarray, dl_dp: np.ndarray) -> np.ndarray:
    # dL/ds_j = p_j * (g_j - sum_k g_k p_k)
    return p * (dl_dp - np.sum(dl_dp * p, axis=1, keepdims=True))


def batch_grad_scores(config: RobustLossConfig, scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the loss with respect to the pre-softmax scores."""
    scores = np.asarray(scores, dtype=float)
    labels = _validate_batch(scores, labels)
    p = softmax_rows(scores)
    n, K = p.shape
    rows = np.arange(n)
    onehot = np.zeros_like(p)
    onehot[rows, labels] = 1.0
    py = np.clip(p[rows, labels], EPS, 1.0)[:, None]
    residual = p - onehot
    family = config.family

    if family is LossFamily.CE:
        grad = residual
    elif family is LossFamily.GCE and not config.verbatim:
        grad = py ** config.q_exponent * residual
    elif family is LossFamily.GCE:
        q = config.q_exponent
        dl_dp = np.zeros_like(p)
        dl_dp[rows, labels] = -np.clip(1.0 - py[:, 0], EPS, 1.0) ** (q - 1.0)
        grad = _chain_through_softmax(p, dl_dp)
    elif family is LossFamily.BCE and not config.verbatim:
        b = config.beta
        pc = np.clip(p, EPS, 1.0)
        power_sum = np.sum(pc ** (b + 1.0), axis=1, keepdims=True)
        grad = (b + 1.0) * (py ** b * residual + pc ** (b + 1.0) - p * power_sum)
    elif family is LossFamily.BCE:
        b = config.beta
        pc = np.clip(p, EPS, 1.0)
        dl_dp = (b + 1.0) * pc ** b
        dl_dp[rows, labels] -= (b + 1.0) * np.clip(1.0 - py[:, 0], EPS, 1.0) ** (b - 1.0)
        grad = _chain_through_softmax(p, dl_dp)
    elif family is LossFamily.RCE:
        grad = -config.A * py * residual
    elif family is LossFamily.MAE:
        grad = 2.0 * py * residual
    elif family is LossFamily.SCE:
        grad = config.alpha * residual - config.gamma * config.A * py * residual
    else:
        raise InvalidHyperparameterError(f"unsupported loss family {family!r}")

    if not np.all(np.isfinite(grad)):
        bad = int(np.argwhere(~np.all(np.isfinite(grad), axis=1))[0, 0])
        raise NumericError("non-finite loss gradient", location=f"loss_grad_scores[{family.value}] row {bad}")
    return grad
