from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import models
from ..errors import TrainingError
from ..losses import NORM_TOLERANCE, SupConBatch, cross_entropy, supcon_grad_total, supcon_loss
from ..models import ModelBundle
from ..optim import AdamState, EarlyStopping, adam_step
from ..preprocess import PreprocessedSample, stack_samples
from ..schemas import EpochRecord, TrainConfig, TrainHistory
from ..settings import debug_log
from ..splits import make_batches, train_val_split
from ..tensor import Rng, Tensor, get_dtype, softmax_stable

ENCODE_CHUNK = 256


@dataclass
class TrainingData:
    x_train: Tensor
    y_train: np.ndarray
    x_val: Tensor
    y_val: np.ndarray
    subjects_train: Tuple[str, ...] = ()
    subjects_val: Tuple[str, ...] = ()

    @property
    def train_count(self) -> int:
        return int(self.y_train.shape[0])

    @property
    def val_count(self) -> int:
        return int(self.y_val.shape[0])

    @property
    def subject_ids(self) -> List[str]:
        return sorted(set(self.subjects_train) | set(self.subjects_val))


def _stack(samples: Sequence[PreprocessedSample], length: int) -> Tuple[Tensor, np.ndarray]:
    if not samples:
        return np.zeros((0, 6, length), dtype=get_dtype()), np.zeros(0, dtype=np.int64)
    return stack_samples(list(samples))


def split_training_data(samples: Sequence[PreprocessedSample], config: TrainConfig) -> TrainingData:
    train, val = train_val_split(samples, ratio=1.0 - config.val_ratio, seed=config.seed)
    return training_data_from(train, val, config.preprocess.length)


def training_data_from(train: Sequence[PreprocessedSample], val: Sequence[PreprocessedSample], length: int = 155) -> TrainingData:
    x_train, y_train = _stack(train, length)
    x_val, y_val = _stack(val, length)
    return TrainingData(
        x_train=x_train,
        y_train=y_train,
        x_val=x_val,
        y_val=y_val,
        subjects_train=tuple(sample.subject_id for sample in train),
        subjects_val=tuple(sample.subject_id for sample in val),
    )


def encode_all(bundle: ModelBundle, x: Tensor, chunk: int = ENCODE_CHUNK) -> Tensor:
    if x.shape[0] == 0:
        return np.zeros((0, bundle.d_e), dtype=x.dtype)
    return np.concatenate([models.encode(bundle, x[start:start + chunk]) for start in range(0, x.shape[0], chunk)])


def _prefixed(prefix: str, values: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {f"{prefix}.{name}": value for name, value in values.items()}


def _norm_tolerance(config: TrainConfig) -> float:
    return NORM_TOLERANCE if config.normalize_z else math.inf


def _log_epoch(verbose: bool, stage: str, record: EpochRecord, max_epochs: int) -> None:
    if not verbose:
        return
    extra = f" val_acc={record.val_accuracy:.4f}" if record.val_accuracy is not None else ""
    skipped = f" skipped={record.skipped_anchors}" if record.skipped_anchors else ""
    print(
        f"[{record.epoch}/{max_epochs}] {stage} train_loss={record.train_loss:.4f} "
        f"val_loss={record.val_loss:.4f}{extra}{skipped}"
    )


def _run_epochs(
    stage: str,
    config: TrainConfig,
    params: Dict[str, Tensor],
    run_epoch: Callable[[int], EpochRecord],
    verbose: bool,
) -> TrainHistory:
    history = TrainHistory(stage=stage)
    stopper = EarlyStopping(patience=config.patience, min_delta=config.min_delta)
    for epoch in range(1, config.max_epochs + 1):
        record = run_epoch(epoch)
        history.epochs.append(record)
        _log_epoch(verbose, stage, record, config.max_epochs)
        if not math.isfinite(record.val_loss):
            raise TrainingError(f"{stage}: validation loss became non-finite at epoch {epoch}")
        if stopper(record.val_loss, epoch, params if config.restore_best else None):
            history.stopped_early = True
            debug_log("train", f"{stage} early stop at epoch {epoch}, best epoch {stopper.best_epoch}")
            break
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_loss
    if config.restore_best:
        history.restored_best = stopper.restore(params)
    return history


# -- stage 1: supervised contrastive ------------------------------------------------


def _supcon_val_loss(bundle: ModelBundle, data: TrainingData, config: TrainConfig) -> Optional[float]:
    """Mean per-anchor SupCon loss over the whole validation set, scored as one batch."""
    if data.val_count < 2:
        return None
    z = models.project(bundle, encode_all(bundle, data.x_val))
    result = supcon_loss(SupConBatch(z, data.y_val, config.tau, _norm_tolerance(config)))
    return result.mean_loss if result.active else None


def train_stage1(
    data: TrainingData, config: TrainConfig, verbose: bool = False
) -> Tuple[ModelBundle, TrainHistory]:
    if config.loss_mode != "scl":
        raise ValueError(f"train_stage1 needs loss_mode='scl', got {config.loss_mode!r}")
    if data.train_count < 2:
        raise TrainingError(f"stage1 needs at least 2 training samples, got {data.train_count}")
    root = Rng(config.seed).child("stage1")
    bundle = models.build_bundle(
        config.arch,
        Rng(config.seed).child("init"),
        with_projection=True,
        proj_dim=config.proj_dim,
        normalize_r=config.normalize_r,
        normalize_z=config.normalize_z,
        dropout_rate=config.dropout_rate,
        input_shape=(6, config.preprocess.length),
        provenance={
            "seed": config.seed,
            "stage": "stage1",
            "loss_mode": "scl",
            "tau": config.tau,
            "subjects": data.subject_ids,
        },
    )
    params = {**_prefixed("encoder", bundle.encoder.params), **_prefixed("projection", bundle.projection.params)}
    state = AdamState()
    tolerance = _norm_tolerance(config)
    warned = set()

    def run_epoch(epoch: int) -> EpochRecord:
        batching = make_batches(
            data.train_count,
            config.batch_size,
            config.seed,
            epoch,
            scl=True,
            labels=data.y_train,
            balanced=config.balanced_batches,
            stream="stage1",
        )
        total_loss = 0.0
        active = 0
        skipped = 0
        for index, batch_idx in enumerate(batching.batches):
            xb, yb = data.x_train[batch_idx], data.y_train[batch_idx]
            r = models.encode(bundle, xb, training=True, rng=root.child("step", epoch, index))
            z = models.project(bundle, r)
            try:
                batch = SupConBatch(z, yb, config.tau, tolerance)
            except ValueError as exc:
                raise TrainingError(f"stage1 epoch {epoch} batch {index}: {exc}") from exc
            result = supcon_loss(batch)
            skipped += result.skipped
            if result.active == 0:
                continue
            total_loss += result.loss
            active += result.active
            grad_r = bundle.projection.backward(supcon_grad_total(batch))
            if bundle.normalize_r:
                grad_r = bundle.r_norm.backward(grad_r)
            bundle.encoder.backward(grad_r)
            grads = {**_prefixed("encoder", bundle.encoder.grads), **_prefixed("projection", bundle.projection.grads)}
            adam_step(params, grads, state, config.learning_rate)
        if active == 0:
            raise TrainingError(
                f"stage1 epoch {epoch}: every anchor was skipped; batches never held two samples of one class"
            )
        if skipped:
            debug_log("train", f"stage1 epoch {epoch}: skipped {skipped} anchors without positives")
            if "skip" not in warned:
                warnings.warn(
                    f"stage1 epoch {epoch}: {skipped} anchors had no positive in their batch; tallies are kept in the history",
                    stacklevel=2,
                )
                warned.add("skip")
        train_loss = total_loss / active
        val_loss = _supcon_val_loss(bundle, data, config)
        if val_loss is None:
            if "val" not in warned:
                warnings.warn("validation set has no positive pairs; early stopping follows the training loss", stacklevel=2)
                warned.add("val")
            val_loss = train_loss
        return EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            skipped_anchors=skipped,
            dropped_batches=batching.dropped,
        )

    history = _run_epochs("stage1", config, params, run_epoch, verbose)
    bundle.provenance["stage1_best_epoch"] = history.best_epoch
    return bundle, history


# -- classifier training (stage 2, fine-tuning, CE baseline) ------------------------


def _ce_eval(bundle: ModelBundle, r: Tensor, y: np.ndarray) -> Tuple[float, float]:
    probs = softmax_stable(bundle.classifier.forward(r), axis=1)
    loss, _ = cross_entropy(probs, y)
    accuracy = float(np.mean(np.argmax(probs, axis=1) == y))
    return loss, accuracy


def _train_head(
    bundle: ModelBundle, data: TrainingData, config: TrainConfig, stage: str, verbose: bool
) -> TrainHistory:
    if data.train_count == 0:
        raise TrainingError(f"{stage}: no training samples")
    before = models.encoder_sha256(bundle)
    r_train = encode_all(bundle, data.x_train)
    r_val = encode_all(bundle, data.x_val)
    root = Rng(config.seed).child(stage)
    params = _prefixed("classifier", bundle.classifier.params)
    state = AdamState()
    if data.val_count == 0:
        warnings.warn(f"{stage}: empty validation set; early stopping follows the training loss", stacklevel=2)

    def run_epoch(epoch: int) -> EpochRecord:
        batching = make_batches(data.train_count, config.batch_size, config.seed, epoch, scl=False, stream=stage)
        weighted = 0.0
        for index, batch_idx in enumerate(batching.batches):
            logits = models.classifier_logits(
                bundle, r_train[batch_idx], training=True, rng=root.child("step", epoch, index)
            )
            loss, grad = cross_entropy(softmax_stable(logits, axis=1), data.y_train[batch_idx])
            weighted += loss * len(batch_idx)
            bundle.classifier.backward(grad)
            adam_step(params, _prefixed("classifier", bundle.classifier.grads), state, config.learning_rate)
        train_loss = weighted / data.train_count
        if data.val_count:
            val_loss, val_acc = _ce_eval(bundle, r_val, data.y_val)
        else:
            val_loss, val_acc = train_loss, None
        return EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_accuracy=val_acc)

    history = _run_epochs(stage, config, params, run_epoch, verbose)
    if models.encoder_sha256(bundle) != before:
        raise TrainingError(f"{stage}: encoder weights changed while training the classifier head")
    return history


def train_stage2(
    bundle: ModelBundle, data: TrainingData, config: TrainConfig, verbose: bool = False
) -> Tuple[ModelBundle, TrainHistory]:
    if bundle.projection is None:
        raise TrainingError("train_stage2 expects a stage-1 bundle with its projection head")
    models.discard_projection(bundle)
    models.reset_classifier(bundle, Rng(config.seed).child("init", "stage2"))
    bundle.provenance["stage"] = "stage2"
    history = _train_head(bundle, data, config, "stage2", verbose)
    return bundle, history


def train_ce(data: TrainingData, config: TrainConfig, verbose: bool = False) -> Tuple[ModelBundle, TrainHistory]:
    if config.loss_mode != "ce":
        raise ValueError(f"train_ce needs loss_mode='ce', got {config.loss_mode!r}")
    if data.train_count == 0:
        raise TrainingError("ce: no training samples")
    bundle = models.build_bundle(
        config.arch,
        Rng(config.seed).child("init"),
        with_projection=False,
        normalize_r=config.normalize_r,
        dropout_rate=config.dropout_rate,
        input_shape=(6, config.preprocess.length),
        provenance={"seed": config.seed, "stage": "ce", "loss_mode": "ce", "subjects": data.subject_ids},
    )
    root = Rng(config.seed).child("ce")
    params = {**_prefixed("encoder", bundle.encoder.params), **_prefixed("classifier", bundle.classifier.params)}
    state = AdamState()
    if data.val_count == 0:
        warnings.warn("ce: empty validation set; early stopping follows the training loss", stacklevel=2)

    def run_epoch(epoch: int) -> EpochRecord:
        batching = make_batches(data.train_count, config.batch_size, config.seed, epoch, scl=False, stream="ce")
        weighted = 0.0
        for index, batch_idx in enumerate(batching.batches):
            step_rng = root.child("step", epoch, index)
            r = models.encode(bundle, data.x_train[batch_idx], training=True, rng=step_rng.child("encoder"))
            logits = models.classifier_logits(bundle, r, training=True, rng=step_rng.child("classifier"))
            loss, grad = cross_entropy(softmax_stable(logits, axis=1), data.y_train[batch_idx])
            weighted += loss * len(batch_idx)
            grad_r = bundle.classifier.backward(grad)
            if bundle.normalize_r:
                grad_r = bundle.r_norm.backward(grad_r)
            bundle.encoder.backward(grad_r)
            grads = {**_prefixed("encoder", bundle.encoder.grads), **_prefixed("classifier", bundle.classifier.grads)}
            adam_step(params, grads, state, config.learning_rate)
        train_loss = weighted / data.train_count
        if data.val_count:
            val_loss, val_acc = _ce_eval(bundle, encode_all(bundle, data.x_val), data.y_val)
        else:
            val_loss, val_acc = train_loss, None
        return EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_accuracy=val_acc)

    history = _run_epochs("ce", config, params, run_epoch, verbose)
    return bundle, history


def check_arch_matches(bundle: ModelBundle, config: TrainConfig) -> None:
    if bundle.arch != config.arch:
        raise TrainingError(
            f"architecture mismatch: model was built as {bundle.arch.model_dump()}, "
            f"run is configured for {config.arch.model_dump()}"
        )


def finetune(
    pretrained: ModelBundle, data: TrainingData, config: TrainConfig, verbose: bool = False
) -> Tuple[ModelBundle, TrainHistory]:
    """Retrain the classifier head on target data with the pretrained encoder frozen.

    The pretrained bundle is left untouched; a copy is returned.
    """
    check_arch_matches(pretrained, config)
    if data.train_count == 0:
        raise TrainingError("finetune needs at least one labelled target sample, got 0")
    bundle = copy.deepcopy(pretrained)
    bundle.projection = None
    if not config.warm_start_head:
        models.reset_classifier(bundle, Rng(config.seed).child("init", "finetune"))
    bundle.provenance["stage"] = "finetune"
    bundle.provenance["warm_start_head"] = config.warm_start_head
    history = _train_head(bundle, data, config, "finetune", verbose)
    return bundle, history


def train_pipeline(
    data: TrainingData, config: TrainConfig, verbose: bool = False
) -> Tuple[ModelBundle, List[TrainHistory], int]:
    if config.loss_mode == "scl":
        stage1_bundle, history1 = train_stage1(data, config, verbose)
        proj_params = models.projection_param_count(stage1_bundle)
        bundle, history2 = train_stage2(stage1_bundle, data, config, verbose)
        return bundle, [history1, history2], proj_params
    bundle, history = train_ce(data, config, verbose)
    return bundle, [history], 0
