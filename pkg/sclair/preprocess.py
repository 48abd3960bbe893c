from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .errors import ShapeError
from .recordings import ImuRecording
from .schemas import LETTERS, PreprocessConfig
from .tensor import Tensor, get_dtype

TARGET_HZ = 62.0
SAMPLE_LENGTH = 155


@dataclass
class PreprocessedSample:
    matrix: Tensor  # (6, length)
    label: str
    subject_id: str
    repetition: int = 0

    @property
    def label_index(self) -> int:
        return LETTERS.index(self.label)


def resample(rec: ImuRecording, target_hz: float = TARGET_HZ) -> ImuRecording:
    """Linear interpolation onto the grid k / target_hz.

    The grid runs from k = 0 to floor((T - 1) * target / source), so the
    last output never extrapolates past the final input sample.
    """
    if not target_hz > 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    source_hz = rec.sampling_rate_hz
    if source_hz == target_hz:
        return rec
    length = rec.length
    if length < 2:
        raise ShapeError(f"resampling needs at least 2 samples, got {length}")
    # The small slack absorbs float error when (T-1)*target/source is integral.
    last = math.floor((length - 1) * target_hz / source_hz + 1e-9)
    grid = np.arange(last + 1, dtype=np.float64) / target_hz
    source_times = np.arange(length, dtype=np.float64) / source_hz
    channels = [np.interp(grid, source_times, channel) for channel in rec.samples]
    return ImuRecording(
        samples=np.vstack(channels),
        sampling_rate_hz=target_hz,
        label=rec.label,
        subject_id=rec.subject_id,
        repetition=rec.repetition,
        source=rec.source,
    )


def fix_length(samples: Tensor, length: int = SAMPLE_LENGTH, truncate: str = "head", pad: str = "tail") -> Tensor:
    """Zero-pad or cut a (C, T) matrix to exactly ``length`` columns.

    ``truncate="head"`` keeps the first ``length`` columns; ``pad="tail"``
    appends zeros after the signal.
    """
    samples = np.asarray(samples)
    channels, steps = samples.shape
    if steps == length:
        return samples.copy()
    if steps > length:
        if truncate == "head":
            return samples[:, :length].copy()
        return samples[:, steps - length:].copy()
    out = np.zeros((channels, length), dtype=samples.dtype)
    if pad == "tail":
        out[:, :steps] = samples
    else:
        out[:, length - steps:] = samples
    return out


def zscore(matrix: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-channel (x - mean) / std with the population std; constant channels become zeros."""
    matrix = np.asarray(matrix, dtype=np.float64)
    mean = matrix.mean(axis=1, keepdims=True)
    std = matrix.std(axis=1, keepdims=True)
    out = (matrix - mean) / np.maximum(std, eps)
    out[(std < eps)[:, 0]] = 0.0
    return out


def preprocess(rec: ImuRecording, config: PreprocessConfig | None = None) -> PreprocessedSample:
    config = config or PreprocessConfig()
    resampled = resample(rec, config.target_hz)
    if config.zscore_before_pad:
        matrix = fix_length(zscore(resampled.samples, config.eps), config.length, config.truncate, config.pad)
    else:
        matrix = zscore(fix_length(resampled.samples, config.length, config.truncate, config.pad), config.eps)
    return PreprocessedSample(
        matrix=matrix,
        label=rec.label,
        subject_id=rec.subject_id,
        repetition=rec.repetition,
    )


def preprocess_all(recordings: Iterable[ImuRecording], config: PreprocessConfig | None = None) -> List[PreprocessedSample]:
    return [preprocess(rec, config) for rec in recordings]


def stack_samples(samples: List[PreprocessedSample], dtype=None):
    x = np.stack([sample.matrix for sample in samples]).astype(dtype or get_dtype())
    y = np.array([sample.label_index for sample in samples], dtype=np.int64)
    return x, y
