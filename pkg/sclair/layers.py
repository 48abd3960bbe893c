"""Layers with hand-written forward and backward passes.

Every layer works on a leading batch axis: sequence layers take
``(N, C, T)``, vector layers take ``(N, D)``. Parameters live in
``layer.params`` and are updated in place; ``layer.grads`` mirrors them
after ``backward``.
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from .errors import SclairError, ShapeError
from .tensor import Rng, Tensor, check_finite, get_dtype

LayerKind = Literal["conv1d", "maxpool1d", "gap", "dense", "relu", "dropout", "lstm", "bilstm", "l2norm"]


class LayerSpec(BaseModel):
    kind: LayerKind
    filters: Optional[int] = None
    kernel: Optional[int] = None
    pool: int = 2
    units: Optional[int] = None
    rate: float = 0.0
    eps: float = 1e-12
    on_zero: Literal["zero", "uniform"] = "zero"

    @model_validator(mode="after")
    def _check_hyperparameters(self) -> "LayerSpec":
        required = {
            "conv1d": ("filters", "kernel"),
            "dense": ("units",),
            "lstm": ("units",),
            "bilstm": ("units",),
        }.get(self.kind, ())
        for field in required:
            value = getattr(self, field)
            if value is None or value < 1:
                raise ValueError(f"{self.kind} layer needs a positive {field}, got {value}")
        if self.pool < 1:
            raise ValueError(f"pool size must be positive, got {self.pool}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        return self


def glorot_uniform(rng: Rng, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(get_dtype())


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, Tensor] = {}
        self._cache = None

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def param_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def zero_grads(self) -> None:
        self.grads = {name: np.zeros_like(value) for name, value in self.params.items()}

    def _cached(self):
        if self._cache is None:
            raise SclairError(f"{self.kind}.backward called before forward")
        return self._cache

    def __repr__(self) -> str:
        return f"{type(self).__name__}(params={self.param_count()})"


def _expect_rank(kind: str, x: Tensor, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{kind} expects a rank-{rank} batch, got shape {x.shape}")


class Conv1D(Layer):
    """Valid cross-correlation, stride 1, bias per output channel."""

    kind = "conv1d"

    def __init__(self, in_channels: int, filters: int, kernel: int, rng: Rng):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.params["w"] = glorot_uniform(
            rng, (filters, in_channels, kernel), in_channels * kernel, filters * kernel
        )
        self.params["b"] = np.zeros(filters, dtype=get_dtype())

    def output_shape(self, input_shape):
        channels, length = input_shape
        if length < self.kernel:
            raise ShapeError(f"conv1d kernel {self.kernel} is longer than the sequence ({length})")
        return (self.filters, length - self.kernel + 1)

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 3)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects {self.in_channels} input channels, got shape {x.shape}")
        if x.shape[2] < self.kernel:
            raise ShapeError(
                f"conv1d needs at least {self.kernel} timesteps, got {x.shape[2]} (kernel {self.kernel})"
            )
        n, c, t = x.shape
        steps = t - self.kernel + 1
        windows = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)  # (N, C, T', K)
        # im2col rows: (N*T', C*K)
        cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(n * steps, c * self.kernel)
        w = self.params["w"].reshape(self.filters, c * self.kernel)
        out = (cols @ w.T + self.params["b"]).reshape(n, steps, self.filters).transpose(0, 2, 1)
        self._cache = (x.shape, cols)
        return check_finite("conv1d.forward", np.ascontiguousarray(out))

    def backward(self, grad):
        shape, cols = self._cached()
        n, c, t = shape
        steps = grad.shape[2]
        w = self.params["w"]
        flat = grad.transpose(0, 2, 1).reshape(n * steps, self.filters)
        self.grads = {
            "w": (flat.T @ cols).reshape(w.shape),
            "b": grad.sum(axis=(0, 2)),
        }
        grad_cols = (flat @ w.reshape(self.filters, c * self.kernel)).reshape(n, steps, c, self.kernel)
        grad_x = np.zeros(shape, dtype=grad.dtype)
        for k in range(self.kernel):
            grad_x[:, :, k:k + steps] += grad_cols[:, :, :, k].transpose(0, 2, 1)
        return check_finite("conv1d.backward", grad_x)


class MaxPool1D(Layer):
    """Non-overlapping max pooling; a trailing remainder is dropped."""

    kind = "maxpool1d"

    def __init__(self, pool: int = 2):
        super().__init__()
        self.pool = pool

    def output_shape(self, input_shape):
        channels, length = input_shape
        if length < self.pool:
            raise ShapeError(f"maxpool1d window {self.pool} is longer than the sequence ({length})")
        return (channels, length // self.pool)

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 3)
        n, c, t = x.shape
        if t < self.pool:
            raise ShapeError(f"maxpool1d needs at least {self.pool} timesteps, got {t}")
        steps = t // self.pool
        windows = x[:, :, : steps * self.pool].reshape(n, c, steps, self.pool)
        # np.argmax returns the first maximal index, which fixes the tie rule.
        argmax = np.argmax(windows, axis=3)
        out = np.take_along_axis(windows, argmax[..., None], axis=3)[..., 0]
        self._cache = (x.shape, argmax)
        return out

    def backward(self, grad):
        shape, argmax = self._cached()
        n, c, t = shape
        steps = argmax.shape[2]
        routed = np.zeros((n, c, steps, self.pool), dtype=grad.dtype)
        np.put_along_axis(routed, argmax[..., None], grad[..., None], axis=3)
        grad_x = np.zeros(shape, dtype=grad.dtype)
        grad_x[:, :, : steps * self.pool] = routed.reshape(n, c, steps * self.pool)
        return grad_x


class GlobalAvgPool(Layer):
    kind = "gap"

    def output_shape(self, input_shape):
        return (input_shape[0],)

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 3)
        if x.shape[2] < 1:
            raise ShapeError("gap needs at least one timestep")
        self._cache = x.shape
        return x.mean(axis=2)

    def backward(self, grad):
        shape = self._cached()
        return np.broadcast_to(grad[:, :, None] / shape[2], shape).copy()


class Dense(Layer):

    kind = "dense"

    def __init__(self, in_features: int, units: int, rng: Rng):
        super().__init__()
        self.in_features = in_features
        self.units = units
        self.params["w"] = glorot_uniform(rng, (units, in_features), in_features, units)
        self.params["b"] = np.zeros(units, dtype=get_dtype())

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise ShapeError(f"dense expects input ({self.in_features},), got {input_shape}")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 2)
        if x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects {self.in_features} features, got shape {x.shape}")
        self._cache = x
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads = {"w": grad.T @ x, "b": grad.sum(axis=0)}
        return grad @ self.params["w"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        # subgradient at exactly 0 is 0
        return np.where(self._cached(), grad, 0.0).astype(grad.dtype, copy=False)


class Dropout(Layer):
    """Inverted dropout. Inference mode returns its input unchanged."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise SclairError("dropout in training mode needs an Rng")
        keep = rng.random(x.shape) >= self.rate
        scale = 1.0 / (1.0 - self.rate)
        self._cache = keep * x.dtype.type(scale)
        return x * self._cache

    def backward(self, grad):
        if self._cache is None:
            return grad
        return grad * self._cache


class L2Norm(Layer):
    """Row-wise unit normalization.

    Rows with norm <= eps stay (near) zero with ``on_zero="zero"``. With
    ``on_zero="uniform"`` they become the constant unit vector 1/sqrt(D)
    and pass no gradient back, so every output row lies on the sphere.
    """

    kind = "l2norm"

    def __init__(self, eps: float = 1e-12, on_zero: str = "zero"):
        super().__init__()
        if on_zero not in ("zero", "uniform"):
            raise ValueError(f"on_zero must be 'zero' or 'uniform', got {on_zero!r}")
        self.eps = eps
        self.on_zero = on_zero

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 2)
        norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        scale = np.maximum(norm, self.eps)
        active = norm > self.eps
        out = x / scale
        if self.on_zero == "uniform" and not np.all(active):
            fill = np.full_like(out, 1.0 / np.sqrt(x.shape[1]))
            out = np.where(active, out, fill)
        self._cache = (out, scale, active)
        return out

    def backward(self, grad):
        out, scale, active = self._cached()
        projected = grad - out * np.sum(out * grad, axis=1, keepdims=True)
        if self.on_zero == "uniform":
            return np.where(active, projected / scale, 0.0).astype(grad.dtype, copy=False)
        return np.where(active, projected, grad) / scale


def _sigmoid(a: Tensor) -> Tensor:
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


class LSTM(Layer):
    """Single-direction LSTM returning the last hidden state.

    Gate blocks are stacked as [input, forget, candidate, output] along the
    first axis of ``wx``, ``wh`` and ``b``. ``h_0 = c_0 = 0``.
    """

    kind = "lstm"

    def __init__(self, in_channels: int, units: int, rng: Rng):
        super().__init__()
        self.in_channels = in_channels
        self.units = units
        self.params["wx"] = glorot_uniform(rng.child("wx"), (4 * units, in_channels), in_channels, 4 * units)
        self.params["wh"] = glorot_uniform(rng.child("wh"), (4 * units, units), units, 4 * units)
        bias = np.zeros(4 * units, dtype=get_dtype())
        bias[units:2 * units] = 1.0
        self.params["b"] = bias

    def output_shape(self, input_shape):
        channels, length = input_shape
        if length < 1:
            raise ShapeError("lstm needs at least one timestep")
        return (self.units,)

    def forward(self, x, training=False, rng=None):
        _expect_rank(self.kind, x, 3)
        n, c, t = x.shape
        if t < 1:
            raise ShapeError("lstm received an empty sequence")
        if c != self.in_channels:
            raise ShapeError(f"lstm expects {self.in_channels} input channels, got shape {x.shape}")
        u = self.units
        wh = self.params["wh"]
        steps = x.transpose(2, 0, 1)  # (T, N, C)
        pre_x = steps @ self.params["wx"].T + self.params["b"]
        h = np.zeros((n, u), dtype=x.dtype)
        cell = np.zeros((n, u), dtype=x.dtype)
        history = []
        for step in range(t):
            a = pre_x[step] + h @ wh.T
            i = _sigmoid(a[:, :u])
            f = _sigmoid(a[:, u:2 * u])
            g = np.tanh(a[:, 2 * u:3 * u])
            o = _sigmoid(a[:, 3 * u:])
            cell_prev, h_prev = cell, h
            cell = f * cell_prev + i * g
            tanh_c = np.tanh(cell)
            h = o * tanh_c
            history.append((i, f, g, o, cell_prev, h_prev, tanh_c))
        self._cache = (steps, history)
        return check_finite("lstm.forward", h)

    def backward(self, grad):
        steps, history = self._cached()
        u = self.units
        wx, wh = self.params["wx"], self.params["wh"]
        t, n, c = steps.shape
        das = np.empty((t, n, 4 * u), dtype=grad.dtype)
        dh = grad
        dc = np.zeros_like(grad)
        for step in reversed(range(t)):
            i, f, g, o, cell_prev, h_prev, tanh_c = history[step]
            do = dh * tanh_c
            dc = dc + dh * o * (1.0 - tanh_c * tanh_c)
            da = das[step]
            da[:, :u] = dc * g * i * (1.0 - i)
            da[:, u:2 * u] = dc * cell_prev * f * (1.0 - f)
            da[:, 2 * u:3 * u] = dc * i * (1.0 - g * g)
            da[:, 3 * u:] = do * o * (1.0 - o)
            dh = da @ wh
            dc = dc * f
        flat = das.reshape(t * n, 4 * u)
        h_prev = np.stack([record[5] for record in history]).reshape(t * n, u)
        self.grads = {
            "wx": flat.T @ steps.reshape(t * n, c),
            "wh": flat.T @ h_prev,
            "b": flat.sum(axis=0),
        }
        grad_steps = (flat @ wx).reshape(t, n, c)
        return check_finite("lstm.backward", np.ascontiguousarray(grad_steps.transpose(1, 2, 0)))


class BiLSTM(Layer):

    kind = "bilstm"

    def __init__(self, in_channels: int, units: int, rng: Rng):
        super().__init__()
        self.units = units
        self.forward_cell = LSTM(in_channels, units, rng.child("fwd"))
        self.backward_cell = LSTM(in_channels, units, rng.child("bwd"))
        self.params = self._merged(self.forward_cell.params, self.backward_cell.params)

    @staticmethod
    def _merged(fwd: Dict[str, Tensor], bwd: Dict[str, Tensor]) -> Dict[str, Tensor]:
        merged = {f"fwd.{name}": value for name, value in fwd.items()}
        merged.update({f"bwd.{name}": value for name, value in bwd.items()})
        return merged

    def output_shape(self, input_shape):
        return (2 * self.forward_cell.output_shape(input_shape)[0],)

    def forward(self, x, training=False, rng=None):
        h_fwd = self.forward_cell.forward(x)
        h_bwd = self.backward_cell.forward(x[:, :, ::-1])
        self._cache = True
        return np.concatenate([h_fwd, h_bwd], axis=1)

    def backward(self, grad):
        self._cached()
        u = self.units
        grad_x = self.forward_cell.backward(grad[:, :u])
        grad_x = grad_x + self.backward_cell.backward(grad[:, u:])[:, :, ::-1]
        self.grads = self._merged(self.forward_cell.grads, self.backward_cell.grads)
        return grad_x


def build_layer(spec: LayerSpec, input_shape: Tuple[int, ...], rng: Rng) -> Layer:
    kind = spec.kind
    if kind == "conv1d":
        return Conv1D(input_shape[0], spec.filters, spec.kernel, rng)
    if kind == "maxpool1d":
        return MaxPool1D(spec.pool)
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "dense":
        return Dense(input_shape[0], spec.units, rng)
    if kind == "relu":
        return ReLU()
    if kind == "dropout":
        return Dropout(spec.rate)
    if kind == "lstm":
        return LSTM(input_shape[0], spec.units, rng)
    if kind == "bilstm":
        return BiLSTM(input_shape[0], spec.units, rng)
    if kind == "l2norm":
        return L2Norm(spec.eps, spec.on_zero)
    raise ValueError(f"Unknown layer kind: {kind}")


class Sequential:

    kind = "sequential"

    def __init__(self, layers: Sequence[Layer] | None = None):
        self.layers: List[Layer] = list(layers or [])

    @classmethod
    def from_specs(
        cls, specs: Sequence[LayerSpec], input_shape: Tuple[int, ...], rng: Rng
    ) -> Tuple["Sequential", List[Tuple[int, ...]]]:
        trace = [tuple(input_shape)]
        layers = []
        shape = tuple(input_shape)
        for index, spec in enumerate(specs):
            layer = build_layer(spec, shape, rng.child("layer", index, spec.kind))
            shape = layer.output_shape(shape)
            layers.append(layer)
            trace.append(shape)
        return cls(layers), trace

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        for index, layer in enumerate(self.layers):
            layer_rng = rng.child("layer", index) if rng is not None else None
            x = layer.forward(x, training=training, rng=layer_rng)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    @property
    def params(self) -> Dict[str, Tensor]:
        return {
            f"{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.params.items()
        }

    @property
    def grads(self) -> Dict[str, Tensor]:
        return {
            f"{index}.{name}": value
            for index, layer in enumerate(self.layers)
            for name, value in layer.grads.items()
        }

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def __len__(self) -> int:
        return len(self.layers)
