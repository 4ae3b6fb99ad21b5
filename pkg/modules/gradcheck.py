"""
Central finite-difference checks for the analytic loss and model gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from main import InvalidInputError
from modules.losses import (
    LossFamily,
    RobustLossConfig,
    batch_grad_scores,
    batch_loss_values,
    softmax_rows,
)
from modules.model import Activation, Gradients, MlpClassifier, backward, forward_batch, init_model, with_weights

LOGGER = logging.getLogger("RobustPL.Gradcheck")

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-5
DEFAULT_ATOL = 1e-8
DEFAULT_POINTS = 100
DEFAULT_CLASS_COUNTS = (2, 3, 10)
SCORE_SCALE = 2.0


def default_cases() -> List[RobustLossConfig]:
    """Every family at the hyperparameters used in the reported experiments."""
    cases = [RobustLossConfig(family=LossFamily.CE)]
    cases += [RobustLossConfig(family=LossFamily.GCE, q_exponent=q) for q in (0.1, 0.7, 0.9)]
    cases += [RobustLossConfig(family=LossFamily.BCE, beta=b) for b in (0.001, 1.0, 5.0)]
    cases += [RobustLossConfig(family=LossFamily.RCE, A=a) for a in (-2.0, -4.0)]
    cases += [RobustLossConfig(family=LossFamily.SCE, alpha=a, gamma=g) for a, g in ((0.1, 0.01), (0.01, 1.0))]
    cases.append(RobustLossConfig(family=LossFamily.MAE))
    return cases


@dataclass
class GradcheckFailure:
    case: str
    K: int
    point: int
    max_error: float

    def describe(self) -> str:
        return f"{self.case} K={self.K} point={self.point} error={self.max_error:.3e}"


@dataclass
class GradcheckReport:
    max_error: Dict[str, float] = field(default_factory=dict)
    failures: List[GradcheckFailure] = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def families(self) -> List[str]:
        seen: List[str] = []
        for label in self.max_error:
            family = label.split("(")[0]
            if family not in seen:
                seen.append(family)
        return seen


def scaled_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    With ``floor = atol / rtol`` an entry passes ``within_tolerance`` exactly
    when its scaled error is at most ``rtol``.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def within_tolerance(analytic, numeric, rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> bool:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    return bool(np.all(diff <= np.maximum(rtol * np.maximum(np.abs(analytic), np.abs(numeric)), atol)))


def numeric_grad_scores(config: RobustLossConfig, scores: np.ndarray, label: int, h: float = DEFAULT_STEP) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    K = scores.size
    labels = np.array([label])
    grad = np.empty(K)
    for j in range(K):
        plus = scores.copy()
        minus = scores.copy()
        plus[j] += h
        minus[j] -= h
        lp = batch_loss_values(config, softmax_rows(plus[None, :]), labels)[0]
        lm = batch_loss_values(config, softmax_rows(minus[None, :]), labels)[0]
        grad[j] = (lp - lm) / (2.0 * h)
    return grad


def check_loss_case(
    config: RobustLossConfig,
    rng: np.random.Generator,
    points: int = DEFAULT_POINTS,
    class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    h: float = DEFAULT_STEP,
) -> Tuple[float, List[GradcheckFailure]]:
    worst = 0.0
    failures: List[GradcheckFailure] = []
    for point in range(points):
        K = int(class_counts[point % len(class_counts)])
        scores = rng.normal(0.0, SCORE_SCALE, size=K)
        label = int(rng.integers(0, K))
        analytic = batch_grad_scores(config, scores[None, :], np.array([label]))[0]
        numeric = numeric_grad_scores(config, scores, label, h)
        err = float(np.max(scaled_error(analytic, numeric, atol / rtol)))
        worst = max(worst, err)
        if not within_tolerance(analytic, numeric, rtol, atol):
            failures.append(GradcheckFailure(config.label, K, point, err))
    return worst, failures


def run_gradcheck(
    cases: Optional[Sequence[RobustLossConfig]] = None,
    points: int = DEFAULT_POINTS,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    seed: int = 0,
    class_counts: Sequence[int] = DEFAULT_CLASS_COUNTS,
) -> GradcheckReport:
    if points < 1:
        raise InvalidInputError("points must be >= 1")
    report = GradcheckReport()
    for config in cases if cases is not None else default_cases():
        rng = np.random.default_rng([int(seed), list(LossFamily).index(config.family)])
        worst, failures = check_loss_case(config, rng, points, class_counts, rtol, atol)
        report.max_error[config.label] = worst
        report.failures.extend(failures)
        report.checked += points
        LOGGER.debug("gradcheck %s: max scaled error %.3e (%d failures)", config.label, worst, len(failures))
    return report


# ---------- Whole-model check ----------
def _batch_loss(model: MlpClassifier, X: np.ndarray, y: np.ndarray, losses: Sequence[RobustLossConfig]) -> float:
    probs = softmax_rows(forward_batch(model, X))
    total = 0.0
    for i, cfg in enumerate(losses):
        total += batch_loss_values(cfg, probs[i:i + 1], y[i:i + 1])[0]
    return total / len(losses)


def numeric_model_grads(
    model: MlpClassifier,
    X: np.ndarray,
    y: np.ndarray,
    losses: Sequence[RobustLossConfig],
    h: float = DEFAULT_STEP,
) -> Gradients:
    w_grads = []
    b_grads = []
    for idx, layer in enumerate(model.layers):
        gw = np.empty_like(layer.weights)
        for pos in np.ndindex(*layer.weights.shape):
            plus = layer.weights.copy()
            minus = layer.weights.copy()
            plus[pos] += h
            minus[pos] -= h
            gw[pos] = (
                _batch_loss(with_weights(model, idx, weights=plus), X, y, losses)
                - _batch_loss(with_weights(model, idx, weights=minus), X, y, losses)
            ) / (2.0 * h)
        gb = np.empty_like(layer.bias)
        for pos in range(layer.bias.size):
            plus = layer.bias.copy()
            minus = layer.bias.copy()
            plus[pos] += h
            minus[pos] -= h
            gb[pos] = (
                _batch_loss(with_weights(model, idx, bias=plus), X, y, losses)
                - _batch_loss(with_weights(model, idx, bias=minus), X, y, losses)
            ) / (2.0 * h)
        w_grads.append(gw)
        b_grads.append(gb)
    return Gradients(weights=tuple(w_grads), biases=tuple(b_grads), loss=_batch_loss(model, X, y, losses))


def check_model_gradients(
    cases: Optional[Sequence[RobustLossConfig]] = None,
    batches: int = 20,
    batch_size: int = 8,
    layer_dims: Sequence[int] = (2, 16, 3),
    rtol: float = 1e-4,
    atol: float = DEFAULT_ATOL,
    seed: int = 0,
) -> GradcheckReport:
    """Backprop vs finite differences on a small relu network, one family per batch."""
    cases = list(cases) if cases is not None else [RobustLossConfig(family=f) for f in LossFamily if f is not LossFamily.SCE] + [
        RobustLossConfig(family=LossFamily.SCE, alpha=0.1, gamma=1.0)
    ]
    report = GradcheckReport()
    rng = np.random.default_rng(int(seed))
    K = int(layer_dims[-1])
    for config in cases:
        worst = 0.0
        for batch in range(batches):
            model = init_model(layer_dims, Activation.RELU, seed=int(rng.integers(0, 2 ** 31)))
            X = rng.normal(0.0, 1.0, size=(batch_size, int(layer_dims[0])))
            y = rng.integers(0, K, size=batch_size)
            losses = [config] * batch_size
            analytic = backward(model, X, y, losses)
            numeric = numeric_model_grads(model, X, y, losses)
            pairs = list(zip(analytic.weights, numeric.weights)) + list(zip(analytic.biases, numeric.biases))
            for a, n in pairs:
                err = float(np.max(scaled_error(a, n, atol / rtol)))
                worst = max(worst, err)
                if not within_tolerance(a, n, rtol, atol):
                    report.failures.append(GradcheckFailure(config.label, K, batch, err))
                    break
        report.max_error[config.label] = worst
        report.checked += batches
    return report
