from __future__ import annotations

import time
from typing import Callable, Dict, List, Sequence

import numpy as np
from joblib import Parallel, delayed

from .. import models
from ..errors import TrainingError
from ..preprocess import PreprocessedSample, preprocess_all
from ..recordings import load_recordings
from ..schemas import DatasetManifest, EvalReport, TrainConfig
from ..settings import DEFAULT_JOBS, PARALLEL_BACKEND, debug_log
from ..splits import Fold, loso_splits
from ..tensor import derive_seed
from . import evaluation_service, training_service
from .evaluation_service import FoldResult


def load_samples(manifest: DatasetManifest, config: TrainConfig) -> List[PreprocessedSample]:
    return preprocess_all(load_recordings(manifest), config.preprocess)


def fold_config(config: TrainConfig, tag: str, subject: str) -> TrainConfig:
    return config.model_copy(update={"seed": derive_seed(config.seed, tag, subject)})


def assert_no_leakage(fold: Fold, data: training_service.TrainingData) -> None:
    leaked = {fold.test_subject} & (set(data.subjects_train) | set(data.subjects_val))
    if leaked:
        raise TrainingError(f"fold {fold.index}: held-out subject {fold.test_subject} leaked into training data")


def _run_one_fold(
    run_fold: Callable[[Fold, List[PreprocessedSample], List[PreprocessedSample]], FoldResult],
    fold: Fold,
    samples: Sequence[PreprocessedSample],
) -> FoldResult:
    test = [sample for sample in samples if sample.subject_id == fold.test_subject]
    train = [sample for sample in samples if sample.subject_id != fold.test_subject]
    try:
        return run_fold(fold, train, test)
    except Exception as exc:
        raise TrainingError(f"fold {fold.index} (test subject {fold.test_subject}) failed: {exc}") from exc


def run_loso_folds(
    folds: Sequence[Fold],
    samples: Sequence[PreprocessedSample],
    run_fold: Callable[[Fold, List[PreprocessedSample], List[PreprocessedSample]], FoldResult],
    jobs: int = 1,
    verbose: bool = False,
    backend: str = PARALLEL_BACKEND,
) -> List[FoldResult]:
    """Run ``run_fold`` for every fold, serially or on a joblib worker pool.

    ``backend="loky"`` trains folds in separate processes; ``"threading"``
    keeps them in this one. Results come back in fold order regardless of
    completion order. A failing fold aborts the run with its id.
    """
    results: Dict[int, FoldResult] = {}
    total = len(folds)
    if jobs <= 1:
        for fold in folds:
            results[fold.index] = _run_one_fold(run_fold, fold, samples)
            if verbose:
                print(f"[{fold.index + 1}/{total}] {fold.test_subject}: accuracy={results[fold.index].accuracy:.4f}")
    else:
        debug_log("loso", f"{total} folds on {jobs} {backend} workers")
        pool = Parallel(n_jobs=jobs, backend=backend, return_as="generator_unordered")
        done = 0
        for result in pool(delayed(_run_one_fold)(run_fold, fold, samples) for fold in folds):
            results[result.index] = result
            done += 1
            if verbose:
                print(f"[{done}/{total}] {result.subject}: accuracy={result.accuracy:.4f}")
    return [results[fold.index] for fold in folds]


def loso_run(
    manifest: DatasetManifest,
    config: TrainConfig,
    jobs: int = DEFAULT_JOBS,
    verbose: bool = False,
    samples: Sequence[PreprocessedSample] | None = None,
    k: int = 5,
    backend: str = PARALLEL_BACKEND,
) -> EvalReport:
    started = time.perf_counter()
    folds = loso_splits(manifest)
    if samples is None:
        samples = load_samples(manifest, config)
    debug_log("loso", f"{len(folds)} folds over {len(samples)} samples, jobs={jobs}")

    def run_fold(fold: Fold, train: List[PreprocessedSample], test: List[PreprocessedSample]) -> FoldResult:
        local = fold_config(config, "fold", fold.test_subject)
        data = training_service.split_training_data(train, local)
        assert_no_leakage(fold, data)
        bundle, histories, _ = training_service.train_pipeline(data, local)
        predictions = evaluation_service.predict_samples(bundle, test)
        return FoldResult(
            index=fold.index,
            subject=fold.test_subject,
            y_true=np.array([sample.label_index for sample in test], dtype=np.int64),
            y_pred=predictions,
            skipped_anchors=sum(history.skipped_anchors for history in histories),
            encoder_sha256=models.encoder_sha256(bundle),
            details={
                "train_count": data.train_count,
                "val_count": data.val_count,
                "epochs": {history.stage: len(history.epochs) for history in histories},
                "best_epochs": {history.stage: history.best_epoch for history in histories},
            },
        )

    results = run_loso_folds(folds, samples, run_fold, jobs=jobs, verbose=verbose, backend=backend)
    return evaluation_service.build_report(
        results,
        config=config.model_dump(mode="json"),
        k=k,
        wall_clock_s=time.perf_counter() - started,
    )
