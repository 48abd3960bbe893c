from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple, TypeVar

import numpy as np

from .schemas import LETTERS, DatasetManifest
from .tensor import Rng

T = TypeVar("T")

MIN_SAMPLES_PER_CLASS = 5


@dataclass(frozen=True)
class Fold:
    index: int
    test_subject: str
    train_subjects: Tuple[str, ...]


@dataclass
class Batching:
    batches: List[np.ndarray]
    dropped: int = 0
    dropped_samples: List[int] = field(default_factory=list)


def loso_splits(source: DatasetManifest | Iterable[str]) -> List[Fold]:
    if isinstance(source, DatasetManifest):
        subjects = source.subjects
    else:
        subjects = sorted(set(source))
    if len(subjects) < 2:
        raise ValueError(
            f"leave-one-subject-out needs at least 2 subjects, found {len(subjects)}: "
            "every fold must train on someone other than the held-out subject"
        )
    return [
        Fold(index=index, test_subject=subject, train_subjects=tuple(s for s in subjects if s != subject))
        for index, subject in enumerate(subjects)
    ]


def train_val_split(samples: Sequence[T], ratio: float = 0.8, seed: int = 0) -> Tuple[List[T], List[T]]:
    """Stratified split: per label, shuffle and send the first ceil(ratio * n) to train.

    Output keeps the input order within each side.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"train ratio must lie in (0, 1], got {ratio}")
    by_label: Dict[str, List[int]] = defaultdict(list)
    for index, sample in enumerate(samples):
        by_label[sample.label].append(index)

    rng = Rng(seed).child("train_val_split")
    train_idx: List[int] = []
    for label in sorted(by_label):
        members = by_label[label]
        if len(members) < MIN_SAMPLES_PER_CLASS:
            warnings.warn(
                f"class {label} has only {len(members)} samples; stratified split may be unrepresentative",
                stacklevel=2,
            )
        order = rng.child(label).permutation(len(members))
        cut = math.ceil(ratio * len(members) - 1e-9)
        train_idx.extend(members[i] for i in order[:cut])

    missing = [label for label in LETTERS if label not in by_label]
    if by_label and missing:
        warnings.warn(f"classes with no samples: {', '.join(missing)}", stacklevel=2)

    chosen = set(train_idx)
    train = [sample for index, sample in enumerate(samples) if index in chosen]
    val = [sample for index, sample in enumerate(samples) if index not in chosen]
    if not val:
        warnings.warn(f"train ratio {ratio} leaves the validation set empty", stacklevel=2)
    return train, val


def make_batches(
    count: int,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
    scl: bool = True,
    labels: Sequence[int] | None = None,
    balanced: bool = False,
    stream: str = "batches",
) -> Batching:
    """Shuffle ``range(count)`` by (seed, stream, epoch) and cut it into batches.

    The final partial batch is kept; in SCL mode a trailing batch of one
    sample is dropped and tallied since it has no pair to contrast.
    ``balanced`` interleaves classes round-robin, two samples at a time, after
    shuffling each class, so contrastive batches see positive pairs.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    rng = Rng(seed).child(stream, epoch)
    if balanced:
        if labels is None or len(labels) != count:
            raise ValueError("balanced batching needs one label per sample")
        groups: Dict[int, List[int]] = defaultdict(list)
        for index, label in enumerate(labels):
            groups[int(label)].append(index)
        queues = []
        for label in sorted(groups):
            members = np.asarray(groups[label])
            queues.append(list(members[rng.child("class", label).permutation(len(members))]))
        order = []
        while any(queues):
            for queue in queues:
                order.extend(queue[:2])
                del queue[:2]
        order = np.asarray(order, dtype=np.int64)
    else:
        order = rng.permutation(count).astype(np.int64)

    batches = [order[start:start + batch_size] for start in range(0, count, batch_size)]
    result = Batching(batches=batches)
    if scl and batches and len(batches[-1]) < 2:
        tail = batches.pop()
        result.dropped = 1
        result.dropped_samples = [int(i) for i in tail]
    return result
