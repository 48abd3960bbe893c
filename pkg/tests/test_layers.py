import numpy as np
import pytest

from sclair.errors import SclairError, ShapeError
from sclair.gradcheck import gradcheck
from sclair.layers import (
    LSTM,
    BiLSTM,
    Conv1D,
    Dense,
    Dropout,
    GlobalAvgPool,
    L2Norm,
    LayerSpec,
    MaxPool1D,
    ReLU,
    Sequential,
)
from sclair.services.gradcheck_service import layer_cases
from sclair.tensor import Rng, precision


def _conv_oracle(x, w, b):
    n, c, t = x.shape
    f, _, k = w.shape
    out = np.zeros((n, f, t - k + 1))
    for s in range(n):
        for o in range(f):
            for step in range(t - k + 1):
                out[s, o, step] = b[o] + sum(
                    w[o, ch, j] * x[s, ch, step + j] for ch in range(c) for j in range(k)
                )
    return out


def test_conv1d_matches_nested_loop_oracle(float64):
    layer = Conv1D(3, 4, 3, Rng(0))
    layer.params["b"][...] = [0.1, -0.2, 0.3, 0.0]
    x = Rng(1).normal(size=(2, 3, 8))
    assert np.allclose(layer.forward(x), _conv_oracle(x, layer.params["w"], layer.params["b"]), atol=1e-12)


def test_conv1d_rejects_short_sequence():
    layer = Conv1D(2, 3, 5, Rng(0))
    with pytest.raises(ShapeError, match="kernel"):
        layer.forward(np.zeros((1, 2, 4), dtype=np.float32))


def test_maxpool_routes_gradient_to_first_maximum():
    layer = MaxPool1D(2)
    x = np.array([[[1.0, 1.0, 0.0, 2.0, 5.0]]])
    assert layer.forward(x).tolist() == [[[1.0, 2.0]]]
    grad = layer.backward(np.array([[[1.0, 1.0]]]))
    assert grad.tolist() == [[[1.0, 0.0, 0.0, 1.0, 0.0]]]


def test_dropout_inference_is_identity_and_training_needs_rng():
    layer = Dropout(0.5)
    x = np.ones((2, 4))
    assert layer.forward(x) is x
    with pytest.raises(SclairError):
        layer.forward(x, training=True)


def test_dropout_training_mask_is_scaled():
    layer = Dropout(0.5)
    x = np.full((100, 1000), 3.0)
    out = layer.forward(x, training=True, rng=Rng(3))
    assert set(np.unique(out).tolist()) <= {0.0, 6.0}
    assert abs(np.mean(out != 0.0) - 0.5) < 0.01
    assert np.mean(out) == pytest.approx(3.0, abs=0.05)


def test_relu_gradient_is_zero_at_zero():
    layer = ReLU()
    layer.forward(np.array([[-1.0, 0.0, 2.0]]))
    assert layer.backward(np.ones((1, 3))).tolist() == [[0.0, 0.0, 1.0]]


def test_l2norm_output_is_unit_and_zero_row_finite():
    layer = L2Norm()
    out = layer.forward(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert np.linalg.norm(out[0]) == pytest.approx(1.0)
    assert np.all(np.isfinite(out[1]))


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def test_lstm_single_step_matches_cell_equations(float64):
    layer = LSTM(3, 2, Rng(5))
    x = Rng(6).normal(size=(1, 3, 1))
    wx, b = layer.params["wx"], layer.params["b"]
    a = wx @ x[0, :, 0] + b
    i, f, g, o = _sigmoid(a[0:2]), _sigmoid(a[2:4]), np.tanh(a[4:6]), _sigmoid(a[6:8])
    cell = f * 0.0 + i * g
    expected = o * np.tanh(cell)
    assert np.allclose(layer.forward(x)[0], expected, atol=1e-12)


def test_lstm_forget_bias_starts_at_one():
    layer = LSTM(2, 3, Rng(0))
    assert layer.params["b"][3:6].tolist() == [1.0, 1.0, 1.0]
    assert layer.params["b"][:3].tolist() == [0.0, 0.0, 0.0]


def test_bilstm_output_concatenates_both_directions(float64):
    layer = BiLSTM(3, 4, Rng(2))
    x = Rng(3).normal(size=(2, 3, 6))
    out = layer.forward(x)
    assert out.shape == (2, 8)
    assert np.allclose(out[:, :4], layer.forward_cell.forward(x))
    assert np.allclose(out[:, 4:], layer.backward_cell.forward(x[:, :, ::-1]))


def test_backward_before_forward_raises():
    with pytest.raises(SclairError, match="before forward"):
        Dense(3, 2, Rng(0)).backward(np.zeros((1, 2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_layer_kind_passes_gradcheck(seed):
    with precision("float64"):
        cases = layer_cases(Rng(seed).child("cases"))
        kinds = set()
        for layer, shape in cases:
            result = gradcheck(layer, shape, seed=seed, tolerance=1e-5)
            kinds.add(result.component)
            assert result.passed, f"{result.component}: {result.groups}"
    assert kinds == {"conv1d", "maxpool1d", "gap", "dense", "relu", "dropout", "l2norm", "lstm", "bilstm"}


def test_gradcheck_detects_a_broken_backward():
    class ScaledDense(Dense):
        def backward(self, grad):
            return 1.01 * super().backward(grad)

    with precision("float64"):
        result = gradcheck(ScaledDense(4, 3, Rng(0)), (2, 4))
    assert not result.passed
    assert result.groups["input"] > 1e-5


def test_sequential_names_params_by_index_and_traces_shapes():
    specs = [
        LayerSpec(kind="conv1d", filters=4, kernel=3),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool1d"),
        LayerSpec(kind="gap"),
        LayerSpec(kind="dense", units=5),
    ]
    stack, trace = Sequential.from_specs(specs, (6, 20), Rng(0))
    assert trace == [(6, 20), (4, 18), (4, 18), (4, 9), (4,), (5,)]
    assert sorted(stack.params) == ["0.b", "0.w", "4.b", "4.w"]
    assert stack.param_count() == 4 * 6 * 3 + 4 + 4 * 5 + 5


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec(kind="conv1d", filters=4)
    with pytest.raises(ValueError):
        LayerSpec(kind="dropout", rate=1.0)


def test_gap_backward_spreads_gradient_evenly():
    layer = GlobalAvgPool()
    layer.forward(np.zeros((1, 2, 4)))
    assert np.allclose(layer.backward(np.array([[4.0, 8.0]])), [[[1.0] * 4, [2.0] * 4]])


def test_maxpool_gradient_has_one_entry_per_window():
    layer = MaxPool1D(3)
    x = Rng(4).normal(size=(2, 3, 13))
    layer.forward(x)
    grad = layer.backward(Rng(5).uniform(0.5, 1.5, size=(2, 3, 4)))
    windows = grad[:, :, :12].reshape(2, 3, 4, 3)
    assert np.all(np.count_nonzero(windows, axis=3) == 1)
    assert np.all(grad[:, :, 12] == 0.0)


def test_zero_upstream_gradient_gives_zero_gradients(float64):
    for layer, shape in layer_cases(Rng(6).child("cases")):
        x = Rng(7).normal(size=shape)
        out = layer.forward(x, training=True, rng=Rng(8))
        grad_x = layer.backward(np.zeros_like(out))
        assert grad_x.shape == x.shape
        assert np.all(grad_x == 0.0), layer.kind
        for name, grad in layer.grads.items():
            assert np.all(grad == 0.0), (layer.kind, name)


def test_l2norm_uniform_fallback_keeps_dead_rows_on_the_sphere(float64):
    layer = L2Norm(on_zero="uniform")
    out = layer.forward(np.array([[3.0, 0.0, 4.0, 0.0], [0.0, 0.0, 0.0, 0.0]]))
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0)
    assert np.allclose(out[1], 0.5)
    grad = layer.backward(np.ones((2, 4)))
    assert np.all(grad[1] == 0.0)
    assert np.any(grad[0] != 0.0)


def test_l2norm_rejects_unknown_zero_policy():
    with pytest.raises(ValueError, match="on_zero"):
        L2Norm(on_zero="random")
