from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .. import __version__, models
from ..errors import SclairError
from ..models import ModelBundle
from ..preprocess import PreprocessedSample, stack_samples
from ..schemas import LETTERS, N_CLASSES, ConfusionPair, EvalReport

CONFUSION_INDEX_LABEL = "true\\pred"


@dataclass
class FoldResult:

    index: int
    subject: str
    y_true: np.ndarray
    y_pred: np.ndarray
    skipped_anchors: int = 0
    encoder_sha256: Optional[str] = None
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.y_true == self.y_pred)) if self.y_true.size else 0.0


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = N_CLASSES) -> np.ndarray:
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return matrix


def top_confusions(confusion: Sequence[Sequence[int]], k: int = 5) -> List[ConfusionPair]:
    """Unordered letter pairs ranked by cm[a][b] + cm[b][a], as a share of all off-diagonal mass.

    Ties keep alphabetical order of the pair. An all-zero off-diagonal gives [].
    """
    matrix = np.asarray(confusion, dtype=np.int64)
    if matrix.shape != (N_CLASSES, N_CLASSES):
        raise ValueError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}, got {matrix.shape}")
    total = int(matrix.sum() - np.trace(matrix))
    if total == 0 or k <= 0:
        return []
    pairs = []
    for a in range(N_CLASSES):
        for b in range(a + 1, N_CLASSES):
            count = int(matrix[a, b] + matrix[b, a])
            if count:
                pairs.append((-count, LETTERS[a], LETTERS[b]))
    pairs.sort()
    return [
        ConfusionPair(pair=(first, second), count=-negative, percent=100.0 * -negative / total)
        for negative, first, second in pairs[:k]
    ]


def build_report(
    folds: Sequence[FoldResult],
    config: Dict[str, Any] | None = None,
    k: int = 5,
    wall_clock_s: float = 0.0,
    encoder_sha256: Optional[str] = None,
    include_folds: bool = True,
) -> EvalReport:
    if not folds or sum(fold.y_true.size for fold in folds) == 0:
        raise ValueError("cannot build a report from an empty sample set")
    confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    per_subject: Dict[str, float] = {}
    for fold in sorted(folds, key=lambda item: item.subject):
        if fold.y_true.size == 0:
            continue
        confusion += confusion_matrix(fold.y_true, fold.y_pred)
        per_subject[fold.subject] = fold.accuracy
    total = int(confusion.sum())
    fold_rows = []
    if include_folds:
        for fold in sorted(folds, key=lambda item: item.index):
            row = {
                "index": fold.index,
                "test_subject": fold.subject,
                "accuracy": fold.accuracy,
                "test_count": int(fold.y_true.size),
                "skipped_anchors": fold.skipped_anchors,
            }
            if fold.encoder_sha256:
                row["encoder_sha256"] = fold.encoder_sha256
            row.update(fold.details)
            fold_rows.append(row)
    return EvalReport(
        version=__version__,
        config=dict(config or {}),
        mean_accuracy=float(np.mean(list(per_subject.values()))),
        pooled_accuracy=float(np.trace(confusion) / total),
        per_subject=per_subject,
        confusion=confusion.tolist(),
        top_confusions=top_confusions(confusion, k),
        skipped_anchors=int(sum(fold.skipped_anchors for fold in folds)),
        sample_count=total,
        wall_clock_s=wall_clock_s,
        encoder_sha256=encoder_sha256,
        folds=fold_rows,
    )


def predict_samples(bundle: ModelBundle, samples: Sequence[PreprocessedSample]) -> np.ndarray:
    x, _ = stack_samples(list(samples))
    return models.predict(bundle, x)


def evaluate(
    bundle: ModelBundle,
    samples: Sequence[PreprocessedSample],
    config: Dict[str, Any] | None = None,
    k: int = 5,
) -> EvalReport:
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if bundle.form != "inference":
        raise SclairError("evaluate expects an inference bundle; discard the projection head and train the classifier first")
    started = time.perf_counter()
    predictions = predict_samples(bundle, samples)
    truth = np.array([sample.label_index for sample in samples], dtype=np.int64)
    subjects = np.array([sample.subject_id for sample in samples])
    folds = [
        FoldResult(index=index, subject=subject, y_true=truth[subjects == subject], y_pred=predictions[subjects == subject])
        for index, subject in enumerate(sorted(set(subjects.tolist())))
    ]
    return build_report(
        folds,
        config=config,
        k=k,
        wall_clock_s=time.perf_counter() - started,
        encoder_sha256=models.encoder_sha256(bundle),
        include_folds=False,
    )


def confusion_frame(confusion: Sequence[Sequence[int]]) -> pd.DataFrame:
    frame = pd.DataFrame(np.asarray(confusion, dtype=np.int64), index=list(LETTERS), columns=list(LETTERS))
    frame.index.name = CONFUSION_INDEX_LABEL
    return frame


def write_confusion_csv(confusion: Sequence[Sequence[int]], path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    confusion_frame(confusion).to_csv(target, lineterminator="\n")
    return target


def read_confusion_csv(path: Path | str) -> np.ndarray:
    frame = pd.read_csv(path, index_col=0)
    if list(frame.columns) != list(LETTERS) or list(frame.index) != list(LETTERS):
        raise ValueError(f"{path}: expected a {N_CLASSES}x{N_CLASSES} confusion table labelled A-Z")
    return frame.to_numpy(dtype=np.int64)


def export_embeddings(bundle: ModelBundle, samples: Sequence[PreprocessedSample], path: Path | str) -> int:
    if not samples:
        raise ValueError("no samples to export")
    x, _ = stack_samples(list(samples))
    columns: Dict[str, Any] = {
        "subject": [sample.subject_id for sample in samples],
        "label": [sample.label for sample in samples],
    }
    r = np.concatenate([models.encode(bundle, x[start:start + 256]) for start in range(0, x.shape[0], 256)])
    blocks = [pd.DataFrame(columns), pd.DataFrame(r, columns=[f"r{i}" for i in range(r.shape[1])])]
    if bundle.projection is not None:
        z = models.project(bundle, r)
        blocks.append(pd.DataFrame(z, columns=[f"z{i}" for i in range(z.shape[1])]))
    frame = pd.concat(blocks, axis=1)
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format="%.8f", lineterminator="\n")
    except OSError as exc:
        raise SclairError(f"cannot write embeddings to {target}: {exc}") from exc
    return len(frame)


def render_report(report: EvalReport, k: Optional[int] = None) -> str:
    lines = [
        f"sclair {report.version}",
        f"mean accuracy (subject mean): {report.mean_accuracy:.4f}",
        f"pooled accuracy: {report.pooled_accuracy:.4f}  samples={report.sample_count}",
    ]
    if report.skipped_anchors:
        lines.append(f"skipped anchors: {report.skipped_anchors}")
    lines.append("")
    lines.append("subject      accuracy")
    for subject, accuracy in report.per_subject.items():
        lines.append(f"{subject:<12} {accuracy:.4f}")
    pairs = report.top_confusions if k is None else top_confusions(report.confusion, k)
    if pairs:
        lines.append("")
        lines.append("most confused pairs")
        for rank, pair in enumerate(pairs, start=1):
            lines.append(f"{rank}. {pair.pair[0]}-{pair.pair[1]}  {pair.count}  {pair.percent:.2f}%")
    return "\n".join(lines)
