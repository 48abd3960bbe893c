"""Dense tensor primitives and the seeded random streams.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. The
helpers here add the shape checks, the precision mode and the
finite-value checks the rest of the package relies on.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator

import numpy as np

from . import settings
from .errors import NonFiniteError, ShapeError

Tensor = np.ndarray

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_MASK64 = (1 << 64) - 1

if settings.DEFAULT_PRECISION not in _PRECISIONS:
    raise ValueError(
        f"SCLAIR_PRECISION must be one of {sorted(_PRECISIONS)}, got {settings.DEFAULT_PRECISION!r}"
    )
_active_dtype = _PRECISIONS[settings.DEFAULT_PRECISION]
_check_finite = settings.SCLAIR_CHECK_FINITE


def get_dtype() -> type:
    return _active_dtype


def set_precision(name: str) -> None:
    global _active_dtype
    if name not in _PRECISIONS:
        raise ValueError(f"Unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _active_dtype = _PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _active_dtype
    previous = _active_dtype
    set_precision(name)
    try:
        yield
    finally:
        _active_dtype = previous


def zeros(shape, dtype=None) -> Tensor:
    return np.zeros(shape, dtype=dtype or _active_dtype)


def check_finite(name: str, tensor: Tensor, *, force: bool = False) -> Tensor:
    if (force or _check_finite) and not np.all(np.isfinite(tensor)):
        bad = int(np.size(tensor) - np.count_nonzero(np.isfinite(tensor)))
        raise NonFiniteError(name, f"{bad} of {np.size(tensor)} entries")
    return tensor


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} · {b.shape}")
    return a @ b


def softmax_stable(v: Tensor, axis: int = -1) -> Tensor:
    v = np.asarray(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor is undefined")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def logsumexp(v: Tensor, axis: int = -1) -> Tensor:
    peak = np.max(v, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    total = np.log(np.sum(np.exp(v - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(total, axis=axis)


def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("cannot normalize an empty tensor")
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    return v / np.maximum(norm, eps)


def _stream_id(parent: int, labels: tuple) -> int:
    text = f"{parent}:" + "/".join(str(label) for label in labels)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Philox keeps the sequence identical across platforms for a given key,
    and ``child`` derives independent streams by name so no two
    components ever share one.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, _stream_id(self.stream, labels))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream:#x})"


def derive_seed(seed: int, *labels) -> int:
    return int(Rng(seed).child(*labels).generator.integers(0, 2**63 - 1))
