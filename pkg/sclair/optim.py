from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], state: AdamState, lr: float = 1e-3) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place.

    Every gradient is checked before any parameter moves, so a bad tensor
    leaves the model untouched.
    """
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            raise KeyError(f"no gradient for parameter {name}")
        if grad.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient {name}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, value in params.items():
        grad = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype, copy=False)
    return state


class EarlyStopping:
    """Stop when the validation loss has not improved for ``patience`` epochs.

    A loss counts as an improvement only when it beats the best so far by
    more than ``min_delta``. ``best_state`` keeps a copy of the weights seen
    at the best epoch.
    """

    def __init__(self, patience: int = 5, min_delta: float = 0.0, verbose: bool = False):
        if patience < 1:
            raise ValueError(f"patience must be at least 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.verbose = verbose
        self.counter = 0
        self.best_loss: Optional[float] = None
        self.best_epoch = 0
        self.best_state: Optional[Dict[str, Tensor]] = None
        self.early_stop = False

    def __call__(self, val_loss: float, epoch: int, params: Dict[str, Tensor] | None = None) -> bool:
        if self.best_loss is None or self.best_loss - val_loss > self.min_delta:
            self.best_loss = float(val_loss)
            self.best_epoch = epoch
            self.counter = 0
            if params is not None:
                self.best_state = {name: value.copy() for name, value in params.items()}
        else:
            self.counter += 1
            if self.verbose:
                print(f"INFO: Early stopping counter {self.counter} of {self.patience}")
            if self.counter >= self.patience:
                self.early_stop = True
        return self.early_stop

    def restore(self, params: Dict[str, Tensor]) -> bool:
        if self.best_state is None:
            return False
        for name, value in params.items():
            value[...] = self.best_state[name]
        return True
