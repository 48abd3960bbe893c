from __future__ import annotations

import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from .. import __version__
from ..gradcheck import gradcheck, numeric_gradient, relative_error
from ..layers import (
    LSTM,
    BiLSTM,
    Conv1D,
    Dense,
    Dropout,
    GlobalAvgPool,
    L2Norm,
    Layer,
    MaxPool1D,
    ReLU,
)
from ..losses import SupConBatch, cross_entropy, supcon_grad_anchor, supcon_grad_total, supcon_loss
from ..models import build_encoder
from ..schemas import N_CLASSES, EncoderArch, GradcheckResult, GradcheckSuiteReport
from ..tensor import Rng, l2_normalize, precision, softmax_stable

SUITE_LABELS = np.array([0, 0, 1, 1, 2, 2, 0, 3], dtype=np.int64)
SUITE_TAU = 0.1


def layer_cases(rng: Rng) -> List[Tuple[Layer, Tuple[int, ...]]]:
    return [
        (Conv1D(3, 4, 3, rng.child("conv1d")), (2, 3, 9)),
        (MaxPool1D(2), (2, 3, 9)),
        (GlobalAvgPool(), (2, 3, 5)),
        (Dense(5, 4, rng.child("dense")), (3, 5)),
        (ReLU(), (3, 6)),
        (Dropout(0.5), (3, 6)),
        (L2Norm(), (3, 5)),
        (LSTM(3, 4, rng.child("lstm")), (2, 3, 5)),
        (BiLSTM(3, 4, rng.child("bilstm")), (2, 3, 5)),
    ]


def small_arch(tag: str) -> EncoderArch:
    return EncoderArch(tag=tag, n1=3, n2=4, kernel=3, lstm_units=3)


def _result(component: str, seed: int, groups: Dict[str, float], tolerance: float) -> GradcheckResult:
    worst = max(groups.values()) if groups else 0.0
    return GradcheckResult(
        component=component,
        seed=seed,
        groups=groups,
        max_rel_error=worst,
        tolerance=tolerance,
        passed=bool(worst < tolerance),
    )


def supcon_reference_loss(z: np.ndarray, labels: np.ndarray, tau: float) -> Tuple[float, List[float]]:
    n = z.shape[0]
    per_anchor = []
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            per_anchor.append(0.0)
            continue
        denominator = sum(math.exp(float(z[i] @ z[a]) / tau) for a in range(n) if a != i)
        term = sum(math.log(math.exp(float(z[i] @ z[p]) / tau) / denominator) for p in positives)
        per_anchor.append(-term / len(positives))
    return float(sum(per_anchor)), per_anchor


def supcon_closed_form_anchor(z: np.ndarray, labels: np.ndarray, tau: float, i: int) -> np.ndarray:
    """(1/tau) [ sum_p z_p (P_ip - 1/|P(i)|) + sum_n z_n P_in ] from explicit sums."""
    n = z.shape[0]
    others = [a for a in range(n) if a != i]
    weights = {a: math.exp(float(z[i] @ z[a]) / tau) for a in others}
    denominator = sum(weights.values())
    positives = [p for p in others if labels[p] == labels[i]]
    negatives = [a for a in others if labels[a] != labels[i]]
    grad = np.zeros_like(z[i])
    for p in positives:
        grad += z[p] * (weights[p] / denominator - 1.0 / len(positives))
    for m in negatives:
        grad += z[m] * (weights[m] / denominator)
    return grad / tau


def _supcon_checks(seed: int, tolerance: float) -> List[GradcheckResult]:
    rng = Rng(seed).child("gradcheck", "supcon")
    z = l2_normalize(rng.normal(size=(len(SUITE_LABELS), 4)))
    labels = SUITE_LABELS
    batch = SupConBatch(z, labels, SUITE_TAU)
    results = []

    reference, _ = supcon_reference_loss(z, labels, SUITE_TAU)
    loss = supcon_loss(batch).loss
    results.append(_result("supcon_loss", seed, {"loss": abs(loss - reference) / max(abs(reference), 1e-300)}, tolerance))

    work = z.copy()

    def anchor_term(i: int) -> Callable[[], float]:
        return lambda: supcon_loss(SupConBatch(work, labels, SUITE_TAU, math.inf)).per_anchor[i]

    closed: Dict[str, float] = {}
    numeric: Dict[str, float] = {}
    for i in range(len(labels)):
        if np.count_nonzero(labels == labels[i]) < 2:
            continue
        analytic = supcon_grad_anchor(batch, i)
        closed[f"anchor{i}"] = relative_error(analytic, supcon_closed_form_anchor(z, labels, SUITE_TAU, i))
        row = work[i]
        numeric[f"anchor{i}"] = relative_error(analytic, numeric_gradient(anchor_term(i), row, f"z[{i}]"))
    results.append(_result("supcon_grad_anchor:closed_form", seed, closed, tolerance))
    results.append(_result("supcon_grad_anchor:finite_diff", seed, numeric, tolerance))

    total = supcon_grad_total(batch)

    def objective() -> float:
        return supcon_loss(SupConBatch(work, labels, SUITE_TAU, math.inf)).loss

    results.append(
        _result("supcon_grad_total", seed, {"z": relative_error(total, numeric_gradient(objective, work, "z"))}, tolerance)
    )

    logits = rng.child("logits").normal(size=(5, N_CLASSES))
    targets = np.arange(5, dtype=np.int64) * 3 % N_CLASSES
    _, grad = cross_entropy(softmax_stable(logits, axis=1), targets)

    def ce_objective() -> float:
        return cross_entropy(softmax_stable(logits, axis=1), targets)[0]

    results.append(
        _result(
            "cross_entropy",
            seed,
            {"logits": relative_error(grad, numeric_gradient(ce_objective, logits, "logits"))},
            tolerance,
        )
    )
    return results


def run_suite(arch: str | None = None, seed: int = 0, tolerance: float = 1e-5) -> GradcheckSuiteReport:
    checks: List[GradcheckResult] = []
    with precision("float64"):
        rng = Rng(seed).child("gradcheck")
        for layer, shape in layer_cases(rng):
            checks.append(gradcheck(layer, shape, seed=seed, tolerance=tolerance))
        if arch is not None:
            encoder, _, _ = build_encoder(small_arch(arch), (6, 16), rng.child("encoder"))
            result = gradcheck(encoder, (2, 6, 16), seed=seed, tolerance=tolerance)
            checks.append(result.model_copy(update={"component": f"encoder:{arch}"}))
        checks.extend(_supcon_checks(seed, tolerance))
    return GradcheckSuiteReport(
        version=__version__,
        seed=seed,
        arch=arch,
        tolerance=tolerance,
        checks=checks,
        passed=all(check.passed for check in checks),
    )
