from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from sclair.preprocess import PreprocessedSample, preprocess_all
from sclair.recordings import load_manifest, load_recordings
from sclair.schemas import EncoderArch, TrainConfig
from sclair.synth import synth_generate
from sclair.tensor import precision

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    """4 subjects x 26 letters x 4 repetitions at 62 Hz."""
    out = tmp_path_factory.mktemp("small")
    synth_generate(n_subjects=4, n_reps=4, rate_hz=62.0, seed=7, out_dir=out)
    return load_manifest(out / "manifest.json")


@pytest.fixture(scope="session")
def small_samples(small_manifest):
    return preprocess_all(load_recordings(small_manifest))


@pytest.fixture
def tiny_arch():
    return EncoderArch(tag="cnn1d", n1=8, n2=8, kernel=5)


@pytest.fixture
def quick_config(tiny_arch):
    return TrainConfig(arch=tiny_arch, max_epochs=2, patience=2, proj_dim=16, seed=3)


@pytest.fixture(scope="session")
def reference_thresholds():
    """Acceptance bounds for the full-size synthetic LOSO run."""
    return json.loads((FIXTURES / "reference_thresholds.json").read_text())


@pytest.fixture
def tiny_golden():
    """Hand-built stage-1 checkpoint with inputs and their exact r and z."""
    golden = json.loads((FIXTURES / "tiny_golden.json").read_text())
    samples = [
        PreprocessedSample(
            matrix=np.asarray(row["x"], dtype=np.float32), label=row["label"], subject_id=row["subject"]
        )
        for row in golden["samples"]
    ]
    return {
        "checkpoint": FIXTURES / golden["checkpoint"],
        "embeddings": FIXTURES / "tiny_embeddings.csv",
        "samples": samples,
        "r": np.asarray([row["r"] for row in golden["samples"]]),
        "z": np.asarray([row["z"] for row in golden["samples"]]),
    }
