import math

import numpy as np
import pytest

from sclair.errors import ShapeError
from sclair.losses import (
    SupConBatch,
    cross_entropy,
    supcon_grad_anchor,
    supcon_grad_total,
    supcon_loss,
)
from sclair.tensor import Rng, l2_normalize, softmax_stable

TAUS = (0.05, 0.1, 0.5, 1.0)


def _double_loop_loss(z, labels, tau):
    total = 0.0
    n = len(labels)
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denominator = sum(math.exp(z[i] @ z[a] / tau) for a in range(n) if a != i)
        total += -sum(math.log(math.exp(z[i] @ z[p] / tau) / denominator) for p in positives) / len(positives)
    return total


def _closed_form_anchor(z, labels, tau, i):
    n = len(labels)
    others = [a for a in range(n) if a != i]
    denominator = sum(math.exp(z[i] @ z[a] / tau) for a in others)
    positives = [p for p in others if labels[p] == labels[i]]
    grad = np.zeros(z.shape[1])
    for a in others:
        prob = math.exp(z[i] @ z[a] / tau) / denominator
        if labels[a] == labels[i]:
            grad += z[a] * (prob - 1.0 / len(positives))
        else:
            grad += z[a] * prob
    return grad / tau


def _random_batch(rng, with_pairs=False):
    n = int(rng.uniform(2, 17))
    d = int(rng.uniform(2, 9))
    classes = int(rng.uniform(1, 5))
    labels = (rng.random(n) * classes).astype(np.int64)
    if with_pairs:
        labels[1] = labels[0]
    z = l2_normalize(rng.normal(size=(n, d)))
    tau = TAUS[int(rng.random() * len(TAUS))]
    return z, labels, tau


def _central_difference(fn, target, h=1e-6):
    grad = np.zeros_like(target)
    flat, out = target.reshape(-1), grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus = fn()
        flat[index] = original - h
        minus = fn()
        flat[index] = original
        out[index] = (plus - minus) / (2 * h)
    return grad


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300)


def test_supcon_loss_matches_double_loop_on_random_batches():
    rng = Rng(11).child("forward")
    for trial in range(100):
        z, labels, tau = _random_batch(rng.child(trial))
        expected = _double_loop_loss(z, labels, tau)
        got = supcon_loss(SupConBatch(z, labels, tau)).loss
        assert abs(got - expected) <= 1e-10 * max(abs(expected), 1.0), (trial, got, expected)


def test_anchor_gradient_matches_closed_form_and_finite_differences():
    rng = Rng(12).child("anchor")
    for trial in range(20):
        z, labels, tau = _random_batch(rng.child(trial), with_pairs=True)
        batch = SupConBatch(z, labels, tau)
        analytic = supcon_grad_anchor(batch, 0)
        assert _rel(analytic, _closed_form_anchor(z, labels, tau, 0)) < 1e-10
        work = z.copy()
        numeric = _central_difference(
            lambda: supcon_loss(SupConBatch(work, labels, tau, math.inf)).per_anchor[0], work[0]
        )
        assert _rel(analytic, numeric) < 1e-6


def test_total_gradient_matches_finite_differences():
    rng = Rng(13).child("total")
    for trial in range(20):
        z, labels, tau = _random_batch(rng.child(trial), with_pairs=True)
        analytic = supcon_grad_total(SupConBatch(z, labels, tau))
        work = z.copy()
        numeric = _central_difference(lambda: supcon_loss(SupConBatch(work, labels, tau, math.inf)).loss, work)
        assert _rel(analytic, numeric) < 1e-5


def test_negative_weight_grows_with_similarity():
    # anchor e1, one positive, negatives at increasing cosine similarity to the anchor
    cosines = np.linspace(-0.9, 0.9, 7)
    rows = [[1.0, 0.0], [0.0, 1.0]] + [[c, math.sqrt(1 - c * c)] for c in cosines]
    z = np.array(rows)
    labels = np.array([0, 0] + list(range(1, 8)))
    for tau in TAUS:
        batch = SupConBatch(z, labels, tau)
        probs = batch.softmax_rows()[0]
        magnitudes = [np.linalg.norm(z[n] * probs[n]) / tau for n in range(2, 9)]
        assert all(b > a for a, b in zip(magnitudes, magnitudes[1:]))


def test_negative_weight_grows_when_one_negative_moves_closer():
    weights = []
    for cosine in (-0.5, 0.0, 0.5, 0.9):
        z = np.array([[1.0, 0.0], [0.0, 1.0], [cosine, math.sqrt(1 - cosine**2)], [-1.0, 0.0]])
        probs = SupConBatch(z, np.array([0, 0, 1, 2]), 0.1).softmax_rows()[0]
        weights.append(probs[2])
    assert all(b > a for a, b in zip(weights, weights[1:]))


def test_anchor_without_positive_is_skipped():
    z = l2_normalize(Rng(0).normal(size=(4, 3)))
    result = supcon_loss(SupConBatch(z, np.array([0, 0, 1, 2]), 0.1))
    assert result.skipped == 2
    assert result.active == 2
    assert result.per_anchor[2] == 0.0 and result.per_anchor[3] == 0.0
    with pytest.raises(ValueError, match="no positives"):
        supcon_grad_anchor(SupConBatch(z, np.array([0, 0, 1, 2]), 0.1), 3)


def test_all_singleton_batch_has_zero_loss_and_gradient():
    z = l2_normalize(Rng(1).normal(size=(3, 4)))
    batch = SupConBatch(z, np.array([0, 1, 2]), 0.5)
    assert supcon_loss(batch).loss == 0.0
    assert np.all(supcon_grad_total(batch) == 0.0)


def test_supcon_batch_validation():
    z = l2_normalize(Rng(2).normal(size=(3, 4)))
    with pytest.raises(ValueError, match="unit-norm"):
        SupConBatch(2.0 * z, np.array([0, 0, 1]), 0.1)
    with pytest.raises(ValueError, match="temperature"):
        SupConBatch(z, np.array([0, 0, 1]), 0.0)
    with pytest.raises(ValueError, match="at least 2"):
        SupConBatch(z[:1], np.array([0]), 0.1)
    with pytest.raises(ShapeError):
        SupConBatch(z, np.array([0, 1]), 0.1)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Rng(3).normal(size=(4, 26))
    probs = softmax_stable(logits, axis=1)
    labels = np.array([0, 5, 25, 5])
    loss, grad = cross_entropy(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(4), labels] = 1.0
    assert loss == pytest.approx(-np.mean(np.log(probs[np.arange(4), labels])))
    assert np.allclose(grad, (probs - onehot) / 4)


def test_cross_entropy_rejects_bad_input():
    probs = np.full((2, 26), 1 / 26)
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(probs, np.array([0, 26]))
    with pytest.raises(ValueError, match="sum to 1"):
        cross_entropy(probs * 2, np.array([0, 1]))


def test_cross_entropy_clamps_zero_probability():
    probs = np.zeros((1, 26))
    probs[0, 1] = 1.0
    loss, _ = cross_entropy(probs, np.array([0]))
    assert loss == pytest.approx(-math.log(1e-12))


def test_supcon_loss_ignores_batch_order():
    rng = Rng(14).child("permute")
    for trial in range(10):
        z, labels, tau = _random_batch(rng.child(trial), with_pairs=True)
        order = np.argsort(rng.child(trial, "order").random(len(labels)))
        base = supcon_loss(SupConBatch(z, labels, tau))
        shuffled = supcon_loss(SupConBatch(z[order], labels[order], tau))
        assert abs(shuffled.loss - base.loss) <= 1e-12 * max(abs(base.loss), 1.0)
        assert np.allclose(shuffled.per_anchor, base.per_anchor[order], atol=1e-12)


def test_supcon_loss_ignores_class_names():
    rng = Rng(15).child("relabel")
    for trial in range(10):
        z, labels, tau = _random_batch(rng.child(trial), with_pairs=True)
        renamed = np.array([100 - 7 * int(label) for label in labels])
        assert supcon_loss(SupConBatch(z, renamed, tau)).loss == pytest.approx(
            supcon_loss(SupConBatch(z, labels, tau)).loss, abs=1e-12
        )


@pytest.mark.parametrize("scale", [0.5, 2.0, 10.0])
def test_dividing_temperature_equals_scaling_similarities(scale):
    rng = Rng(16).child("tau", scale)
    z, labels, tau = _random_batch(rng, with_pairs=True)
    # rows of sqrt(c) * z have pairwise inner products c * (z_i . z_j)
    expected = _double_loop_loss(math.sqrt(scale) * z, labels, tau)
    got = supcon_loss(SupConBatch(z, labels, tau / scale)).loss
    assert got == pytest.approx(expected, rel=1e-10)


def test_small_step_against_gradient_does_not_raise_loss():
    rng = Rng(17)
    centers = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    labels = np.repeat([0, 1], 4)
    z = l2_normalize(centers[labels] + 0.3 * rng.normal(size=(8, 3)))
    for tau in TAUS:
        batch = SupConBatch(z, labels, tau)
        before = supcon_loss(batch).loss
        stepped = l2_normalize(z - 1e-3 * supcon_grad_total(batch))
        assert supcon_loss(SupConBatch(stepped, labels, tau)).loss <= before


def test_anchor_gradient_differs_from_total_gradient_row():
    z = l2_normalize(Rng(18).normal(size=(6, 4)))
    batch = SupConBatch(z, np.array([0, 0, 1, 1, 2, 0]), 0.1)
    # the total gradient also carries z_0's role as positive and negative of other anchors
    assert not np.allclose(supcon_grad_anchor(batch, 0), supcon_grad_total(batch)[0])


def test_cross_entropy_gradient_rows_sum_to_zero():
    probs = softmax_stable(Rng(19).normal(size=(6, 26)), axis=1)
    _, grad = cross_entropy(probs, np.array([0, 3, 3, 25, 12, 7]))
    assert np.all(np.abs(grad.sum(axis=1)) < 1e-9)
