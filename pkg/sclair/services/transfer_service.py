from __future__ import annotations

import time
import warnings
from typing import List, Sequence

import numpy as np

from .. import __version__, models
from ..errors import SclairError
from ..models import ModelBundle
from ..preprocess import PreprocessedSample
from ..schemas import DatasetManifest, TrainConfig, TransferReport
from ..settings import DEFAULT_JOBS, PARALLEL_BACKEND, debug_log
from ..splits import Fold, loso_splits
from . import evaluation_service, training_service
from .evaluation_service import FoldResult
from .loso_service import assert_no_leakage, fold_config, load_samples, run_loso_folds


def source_subjects(bundle: ModelBundle) -> List[str]:
    return sorted(str(subject) for subject in bundle.provenance.get("subjects", []))


def transfer_run(
    pretrained: ModelBundle,
    manifest: DatasetManifest,
    config: TrainConfig,
    jobs: int = DEFAULT_JOBS,
    verbose: bool = False,
    samples: Sequence[PreprocessedSample] | None = None,
    source_model: str = "",
    k: int = 5,
    backend: str = PARALLEL_BACKEND,
) -> TransferReport:
    """Zero-shot score, then LOSO over the target subjects with a retrained head on the frozen encoder.

    Stage-1 models have no trained head, so ``zero_shot`` stays empty.
    """
    training_service.check_arch_matches(pretrained, config)
    folds = loso_splits(manifest)
    if samples is None:
        samples = load_samples(manifest, config)
    echo = config.model_dump(mode="json")
    source_hash = models.encoder_sha256(pretrained)
    shared = sorted(set(manifest.subjects) & set(source_subjects(pretrained)))
    setting = "user_dependent" if shared else "user_independent"
    debug_log("transfer", f"{setting}: {len(shared)} of {len(manifest.subjects)} target subjects seen in training")

    zero_shot = None
    if pretrained.form == "inference":
        started = time.perf_counter()
        zero_shot = evaluation_service.evaluate(pretrained, samples, config=echo, k=k)
        zero_shot.wall_clock_s = time.perf_counter() - started
    else:
        warnings.warn("stage-1 model has no trained classifier head; zero-shot evaluation skipped", stacklevel=2)

    def run_fold(fold: Fold, train: List[PreprocessedSample], test: List[PreprocessedSample]) -> FoldResult:
        local = fold_config(config, "finetune", fold.test_subject)
        data = training_service.split_training_data(train, local)
        assert_no_leakage(fold, data)
        bundle, history = training_service.finetune(pretrained, data, local)
        encoder_hash = models.encoder_sha256(bundle)
        if encoder_hash != source_hash:
            raise SclairError(f"fold {fold.index}: fine-tuning changed the encoder")
        return FoldResult(
            index=fold.index,
            subject=fold.test_subject,
            y_true=np.array([sample.label_index for sample in test], dtype=np.int64),
            y_pred=evaluation_service.predict_samples(bundle, test),
            encoder_sha256=encoder_hash,
            details={
                "train_count": data.train_count,
                "val_count": data.val_count,
                "epochs": len(history.epochs),
                "best_epoch": history.best_epoch,
            },
        )

    started = time.perf_counter()
    results = run_loso_folds(folds, samples, run_fold, jobs=jobs, verbose=verbose, backend=backend)
    finetuned = evaluation_service.build_report(
        results,
        config=echo,
        k=k,
        wall_clock_s=time.perf_counter() - started,
        encoder_sha256=source_hash,
    )
    return TransferReport(
        version=__version__,
        config=echo,
        source_model=source_model,
        source_form=pretrained.form,
        encoder_sha256=source_hash,
        setting=setting,
        shared_subjects=shared,
        zero_shot=zero_shot,
        finetuned=finetuned,
    )
