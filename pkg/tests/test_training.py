import numpy as np
import pytest

from sclair import models
from sclair.errors import TrainingError
from sclair.losses import SupConBatch, cross_entropy
from sclair.schemas import EncoderArch
from sclair.services.training_service import (
    encode_all,
    finetune,
    split_training_data,
    train_ce,
    train_pipeline,
    train_stage1,
    train_stage2,
    training_data_from,
)
from sclair.tensor import softmax_stable


@pytest.fixture
def data(small_samples, quick_config):
    return split_training_data(small_samples, quick_config)


def test_split_keeps_every_sample(data, small_samples):
    assert data.train_count + data.val_count == len(small_samples)
    assert data.x_train.shape[1:] == (6, 155)
    assert set(data.y_val.tolist()) == set(range(26))


def test_pipeline_is_deterministic(data, quick_config):
    first, histories, proj_params = train_pipeline(data, quick_config)
    again, histories_again, _ = train_pipeline(data, quick_config)
    assert models.encoder_sha256(first) == models.encoder_sha256(again)
    assert [h.model_dump() for h in histories] == [h.model_dump() for h in histories_again]
    assert [h.stage for h in histories] == ["stage1", "stage2"]
    assert proj_params == 8 * 16 + 16
    assert first.form == "inference"


def test_stage2_keeps_encoder_frozen_and_drops_projection(data, quick_config):
    stage1, history = train_stage1(data, quick_config)
    assert stage1.form == "stage1"
    assert 1 <= len(history.epochs) <= quick_config.max_epochs
    before = models.encoder_sha256(stage1)
    bundle, _ = train_stage2(stage1, data, quick_config)
    assert models.encoder_sha256(bundle) == before
    assert bundle.projection is None
    with pytest.raises(TrainingError, match="stage-1"):
        train_stage2(bundle, data, quick_config)


def test_ce_never_builds_a_projection(data, quick_config):
    config = quick_config.model_copy(update={"loss_mode": "ce"})
    bundle, history = train_ce(data, config)
    assert bundle.projection is None
    assert history.stage == "ce"
    with pytest.raises(ValueError, match="loss_mode"):
        train_ce(data, quick_config)


def test_restored_weights_reproduce_best_val_loss(data, quick_config):
    config = quick_config.model_copy(update={"loss_mode": "ce", "max_epochs": 4, "patience": 1})
    bundle, history = train_ce(data, config)
    assert history.restored_best
    probs = softmax_stable(bundle.classifier.forward(encode_all(bundle, data.x_val)), axis=1)
    loss, _ = cross_entropy(probs, data.y_val)
    assert loss == pytest.approx(history.best_val_loss, rel=1e-6, abs=1e-6)


def test_finetune_freezes_encoder_and_leaves_pretrained_alone(data, quick_config):
    config = quick_config.model_copy(update={"loss_mode": "ce"})
    pretrained, _ = train_ce(data, config)
    digest = models.encoder_sha256(pretrained)
    head = {name: value.copy() for name, value in pretrained.classifier.params.items()}
    tuned, history = finetune(pretrained, data, config)
    assert history.stage == "finetune"
    assert models.encoder_sha256(tuned) == digest
    assert models.encoder_sha256(pretrained) == digest
    for name, value in head.items():
        assert np.array_equal(pretrained.classifier.params[name], value)


def test_finetune_guards(data, quick_config, small_samples):
    config = quick_config.model_copy(update={"loss_mode": "ce"})
    pretrained, _ = train_ce(data, config)
    other = config.model_copy(update={"arch": EncoderArch(tag="cnn1d", n1=8, n2=8, kernel=3)})
    with pytest.raises(TrainingError, match="architecture mismatch"):
        finetune(pretrained, data, other)
    empty = training_data_from([], small_samples[:4])
    with pytest.raises(TrainingError, match="got 0"):
        finetune(pretrained, empty, config)


def test_all_anchors_skipped_is_an_error(small_samples, quick_config):
    one_per_letter = {}
    for sample in small_samples:
        one_per_letter.setdefault(sample.label, sample)
    train = list(one_per_letter.values())
    data = training_data_from(train, small_samples[-10:])
    config = quick_config.model_copy(update={"batch_size": 2})
    with pytest.raises(TrainingError, match="every anchor was skipped"):
        train_stage1(data, config)


def test_stage1_with_narrow_projection_keeps_z_on_the_sphere(data, quick_config):
    assert quick_config.proj_dim == 16 and quick_config.seed == 3
    bundle, history = train_stage1(data, quick_config)
    assert all(np.isfinite(record.train_loss) for record in history.epochs)
    z = models.project(bundle, encode_all(bundle, data.x_train))
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-5)
    assert bundle.provenance["subjects"] == data.subject_ids


def test_dead_projection_rows_still_form_a_valid_batch(data, quick_config):
    bundle, _ = train_stage1(data, quick_config)
    bundle.projection.params["0.w"][...] = 0.0
    bundle.projection.params["0.b"][...] = -1.0
    z = models.project(bundle, encode_all(bundle, data.x_train[:8]))
    assert np.allclose(z, 0.25)
    SupConBatch(z.astype(np.float64), data.y_train[:8], quick_config.tau)


def test_stage1_loss_falls_within_thirty_epochs(data, quick_config):
    config = quick_config.model_copy(update={"max_epochs": 30, "patience": 30})
    _, history = train_stage1(data, config)
    assert len(history.epochs) == 30
    assert history.epochs[-1].train_loss < history.epochs[0].train_loss


def test_finetune_accepts_a_stage1_bundle(data, quick_config):
    stage1, _ = train_stage1(data, quick_config)
    digest = models.encoder_sha256(stage1)
    tuned, history = finetune(stage1, data, quick_config)
    assert tuned.form == "inference"
    assert stage1.projection is not None
    assert models.encoder_sha256(tuned) == digest
    assert history.stage == "finetune"
