"""Supervised contrastive loss and cross-entropy, with analytic gradients.

Notation: ``z`` is an (N, D) matrix of unit rows, ``s_ij = z_i . z_j``.
For anchor i, P(i) holds the other samples sharing its label and A(i)
holds every other sample. Anchors with an empty P(i) contribute nothing
and are tallied as skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import ShapeError
from .schemas import N_CLASSES
from .tensor import Tensor, logsumexp, softmax_stable

NORM_TOLERANCE = 1e-5


@dataclass
class SupConBatch:
    z: Tensor
    labels: np.ndarray
    tau: float
    norm_tolerance: float = NORM_TOLERANCE

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z.ndim != 2:
            raise ShapeError(f"supcon expects z of shape (N, D), got {self.z.shape}")
        if self.labels.shape != (self.z.shape[0],):
            raise ShapeError(f"labels {self.labels.shape} do not match z {self.z.shape}")
        if self.z.shape[0] < 2:
            raise ValueError(f"supcon needs at least 2 samples, got {self.z.shape[0]}")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        norms = np.sqrt(np.sum(self.z * self.z, axis=1))
        off = np.flatnonzero(np.abs(norms - 1.0) > self.norm_tolerance)
        if off.size:
            raise ValueError(
                f"rows {off.tolist()[:8]} of z are not unit-norm (norms {norms[off][:8].tolist()})"
            )

    @property
    def size(self) -> int:
        return int(self.z.shape[0])

    def positive_mask(self) -> np.ndarray:
        same = self.labels[:, None] == self.labels[None, :]
        np.fill_diagonal(same, False)
        return same

    def softmax_rows(self) -> Tensor:
        """P_ix over A(i): row-wise softmax of s_ix / tau with the diagonal excluded."""
        logits = (self.z @ self.z.T) / self.tau
        np.fill_diagonal(logits, -np.inf)
        return softmax_stable(logits, axis=1)


@dataclass
class SupConResult:
    loss: float
    per_anchor: List[float]
    skipped: int
    active: int = field(default=0)

    @property
    def mean_loss(self) -> float:
        return self.loss / self.active if self.active else 0.0


def supcon_loss(batch: SupConBatch) -> SupConResult:
    positives = batch.positive_mask()
    counts = positives.sum(axis=1)
    logits = (batch.z @ batch.z.T) / batch.tau
    np.fill_diagonal(logits, -np.inf)
    log_denominator = logsumexp(logits, axis=1)
    np.fill_diagonal(logits, 0.0)
    log_prob = logits - log_denominator[:, None]
    pos_sum = np.sum(np.where(positives, log_prob, 0.0), axis=1)
    active = counts > 0
    per_anchor = np.where(active, -pos_sum / np.maximum(counts, 1), 0.0)
    return SupConResult(
        loss=float(np.sum(per_anchor)),
        per_anchor=[float(value) for value in per_anchor],
        skipped=int(np.count_nonzero(~active)),
        active=int(np.count_nonzero(active)),
    )


def supcon_grad_anchor(batch: SupConBatch, i: int) -> Tensor:
    """Partial derivative of anchor i's own term with respect to z_i.

    (1/tau) * { sum_p z_p (P_ip - 1/|P(i)|) + sum_n z_n P_in }, holding
    every other row fixed.
    """
    positives = batch.positive_mask()[i]
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError(f"anchor {i} has no positives; its gradient is undefined")
    probs = batch.softmax_rows()[i]
    negatives = batch.labels != batch.labels[i]
    pos_weights = np.where(positives, probs - 1.0 / n_pos, 0.0)
    neg_weights = np.where(negatives, probs, 0.0)
    return (pos_weights @ batch.z + neg_weights @ batch.z) / batch.tau


def supcon_coefficients(batch: SupConBatch) -> Tensor:
    positives = batch.positive_mask()
    counts = positives.sum(axis=1)
    probs = batch.softmax_rows()
    coeff = probs - positives / np.maximum(counts, 1)[:, None]
    coeff[counts == 0] = 0.0
    np.fill_diagonal(coeff, 0.0)
    return coeff / batch.tau


def supcon_grad_total(batch: SupConBatch) -> Tensor:
    """Gradient of the summed loss with respect to every row of z.

    Row k appears as an anchor in its own term and as a positive or
    member of A(j) in other anchors' terms, hence both coefficient
    directions: G = (C + C^T) z.
    """
    coeff = supcon_coefficients(batch)
    return ((coeff + coeff.T) @ batch.z).astype(batch.z.dtype, copy=False)


def cross_entropy(probs: Tensor, labels: Sequence[int], n_classes: int = N_CLASSES):
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[1] != n_classes:
        raise ShapeError(f"cross_entropy expects probabilities of shape (N, {n_classes}), got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match probabilities {probs.shape}")
    bad = labels[(labels < 0) | (labels >= n_classes)]
    if bad.size:
        raise ValueError(f"labels out of range 0..{n_classes - 1}: {bad.tolist()[:8]}")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    n = probs.shape[0]
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n
