from __future__ import annotations

from typing import Callable, Dict, Tuple

import numpy as np

from .errors import GradcheckError
from .layers import Layer
from .schemas import GradcheckResult
from .tensor import Rng, Tensor, get_dtype


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale = float(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)))
    if scale == 0.0:
        return diff
    return diff / scale


def numeric_gradient(objective: Callable[[], float], target: Tensor, name: str, h: float = 1e-5) -> Tensor:
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    out = grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus = objective()
        flat[index] = original - h
        minus = objective()
        flat[index] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise GradcheckError(f"non-finite objective while perturbing {name}[{index}]")
        out[index] = (plus - minus) / (2.0 * h)
    return grad


def gradcheck(
    layer: Layer,
    input_shape: Tuple[int, ...],
    seed: int = 0,
    tolerance: float = 1e-5,
    h: float = 1e-5,
    training: bool = True,
) -> GradcheckResult:
    """Compare ``layer.backward`` against finite differences.

    The scalar objective is ``sum(forward(x) * R)`` for a fixed random
    ``R``; dropout layers see the same mask on every evaluation because
    each forward gets a fresh Rng with the same key.
    """
    if get_dtype() != np.float64:
        raise GradcheckError("gradcheck requires float64 precision; wrap the call in tensor.precision('float64')")
    for name, value in layer.params.items():
        if value.dtype != np.float64:
            raise GradcheckError(f"parameter {name} of {layer.kind} is {value.dtype}; build the layer in float64")

    rng = Rng(seed).child("gradcheck", layer.kind)
    x = rng.child("input").normal(size=input_shape)
    dropout_key = rng.child("dropout")

    def forward() -> Tensor:
        return layer.forward(x, training=training, rng=Rng(dropout_key.seed, dropout_key.stream))

    upstream = rng.child("upstream").normal(size=forward().shape)

    def objective() -> float:
        return float(np.sum(forward() * upstream))

    forward()
    analytic_x = layer.backward(upstream)
    analytic: Dict[str, Tensor] = {name: value.copy() for name, value in layer.grads.items()}
    analytic["input"] = np.array(analytic_x, copy=True)

    groups: Dict[str, float] = {}
    for name, value in layer.params.items():
        if not np.all(np.isfinite(analytic[name])):
            raise GradcheckError(f"non-finite analytic gradient for {layer.kind}.{name}")
        numeric = numeric_gradient(objective, value, f"{layer.kind}.{name}", h)
        groups[name] = relative_error(analytic[name], numeric)
    if not np.all(np.isfinite(analytic["input"])):
        raise GradcheckError(f"non-finite analytic gradient for {layer.kind}.input")
    groups["input"] = relative_error(analytic["input"], numeric_gradient(objective, x, f"{layer.kind}.input", h))

    worst = max(groups.values()) if groups else 0.0
    return GradcheckResult(
        component=layer.kind,
        seed=seed,
        groups=groups,
        max_rel_error=worst,
        tolerance=tolerance,
        passed=worst < tolerance,
    )
