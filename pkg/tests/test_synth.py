import numpy as np
import pytest

from sclair.errors import SclairError
from sclair.synth import (
    SOURCE_PROFILE,
    TARGET_PROFILE,
    letter_params,
    returning_user_jitter,
    subject_jitter,
    synth_generate,
)


def _tree(root):
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


def test_same_seed_gives_byte_identical_dataset(tmp_path):
    synth_generate(2, 2, 62.0, seed=5, out_dir=tmp_path / "a")
    synth_generate(2, 2, 62.0, seed=5, out_dir=tmp_path / "b")
    synth_generate(2, 2, 62.0, seed=6, out_dir=tmp_path / "c")
    first, second, other = _tree(tmp_path / "a"), _tree(tmp_path / "b"), _tree(tmp_path / "c")
    assert first == second
    assert first["S01/A_00.csv"] != other["S01/A_00.csv"]


def test_file_count(tmp_path):
    manifest = synth_generate(10, 5, 62.0, seed=0, out_dir=tmp_path)
    assert len(list(tmp_path.rglob("*.csv"))) == 1300
    assert len(manifest.samples) == 1300
    assert manifest.subjects[0] == "S01" and manifest.subjects[-1] == "S10"


def test_generator_guards(tmp_path):
    with pytest.raises(ValueError, match="at least 2 subjects"):
        synth_generate(1, 1, 62.0, seed=0, out_dir=tmp_path)
    with pytest.raises(ValueError, match="profile"):
        synth_generate(2, 1, 62.0, seed=0, out_dir=tmp_path, profile="phone")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SclairError):
        synth_generate(2, 1, 62.0, seed=0, out_dir=blocker / "sub")


def test_parameter_ranges():
    params = letter_params(0, 3)
    assert np.all((params.freq >= 0.5) & (params.freq <= 3.0))
    assert np.all((params.amp_a >= 0.2) & (params.amp_a <= 1.0))
    phase, gain = subject_jitter(0, "S01", SOURCE_PROFILE)
    assert np.all((phase >= 0) & (phase <= np.pi / 4))
    assert np.all((gain >= 0.8) & (gain <= 1.2))
    wide_phase, _ = subject_jitter(0, "T01", TARGET_PROFILE)
    assert np.all(wide_phase <= np.pi / 2)


def test_target_profile_names_subjects_and_keeps_rate(tmp_path):
    manifest = synth_generate(2, 1, 200.0, seed=5, out_dir=tmp_path, profile="target")
    assert manifest.subjects == ["T01", "T02"]
    assert manifest.sampling_rate_hz == 200.0


def test_nearest_centroid_beats_chance_by_ten(small_samples):
    subjects = sorted({s.subject_id for s in small_samples})
    x = np.stack([s.matrix.ravel() for s in small_samples])
    y = np.array([s.label_index for s in small_samples])
    who = np.array([s.subject_id for s in small_samples])
    correct = 0
    for subject in subjects:
        train, test = who != subject, who == subject
        centroids = np.stack([x[train & (y == k)].mean(axis=0) for k in range(26)])
        distances = ((x[test][:, None, :] - centroids[None]) ** 2).sum(axis=2)
        correct += int(np.sum(np.argmin(distances, axis=1) == y[test]))
    assert correct / len(small_samples) >= 10 / 26


def test_same_users_keep_source_ids_and_phase_style(tmp_path):
    manifest = synth_generate(2, 1, 200.0, seed=5, out_dir=tmp_path / "same", profile="target", same_users=True)
    assert manifest.subjects == ["S01", "S02"]
    assert manifest.dataset_name == "synthetic-target-same-users-seed5"
    source = synth_generate(2, 1, 62.0, seed=5, out_dir=tmp_path / "source")
    assert source.dataset_name == "synthetic-source-seed5"
    phase, gain = returning_user_jitter(5, "S01", TARGET_PROFILE)
    source_phase, source_gain = subject_jitter(5, "S01", SOURCE_PROFILE)
    assert np.array_equal(phase, source_phase)
    assert not np.array_equal(gain, source_gain)
    assert np.all((gain >= TARGET_PROFILE.gain_low) & (gain <= TARGET_PROFILE.gain_high))


def test_same_user_recordings_differ_from_source_device(tmp_path):
    synth_generate(2, 1, 62.0, seed=5, out_dir=tmp_path / "source")
    synth_generate(2, 1, 62.0, seed=5, out_dir=tmp_path / "same", profile="target", same_users=True)
    assert (tmp_path / "same" / "S01" / "A_00.csv").read_bytes() != (tmp_path / "source" / "S01" / "A_00.csv").read_bytes()
