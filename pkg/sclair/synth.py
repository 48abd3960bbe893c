"""Synthetic airwriting-like datasets for desk-scale runs.

Each letter gets fixed per-channel frequency and amplitude parameters drawn
from a letter-keyed stream, so two datasets generated with the same seed
share class structure even when their subjects differ. Each subject adds a
phase offset and a gain, and every recording adds Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import SclairError
from .recordings import CHANNELS, write_recording_csv, write_manifest
from .schemas import LETTERS, DatasetManifest, ManifestEntry
from .settings import debug_log
from .tensor import Rng

N_CHANNELS = len(CHANNELS)


@dataclass(frozen=True)
class SubjectProfile:

    name: str = "source"
    subject_prefix: str = "S"
    phase_max: float = math.pi / 4
    gain_low: float = 0.8
    gain_high: float = 1.2
    duration_low: float = 1.5
    duration_high: float = 3.0
    noise_sigma: float = 0.05


SOURCE_PROFILE = SubjectProfile()

# A second device: different subjects, wider jitter. Letter parameters are
# unchanged, so a source-trained encoder still transfers.
TARGET_PROFILE = SubjectProfile(
    name="target",
    subject_prefix="T",
    phase_max=math.pi / 2,
    gain_low=0.6,
    gain_high=1.4,
)

PROFILES = {"source": SOURCE_PROFILE, "target": TARGET_PROFILE}


@dataclass(frozen=True)
class LetterParams:
    freq: np.ndarray  # (6,) Hz
    amp_a: np.ndarray  # (6,)
    amp_b: np.ndarray  # (6,)


def letter_params(seed: int, letter_index: int) -> LetterParams:
    rng = Rng(seed).child("letter", letter_index)
    return LetterParams(
        freq=rng.uniform(0.5, 3.0, N_CHANNELS),
        amp_a=rng.uniform(0.2, 1.0, N_CHANNELS),
        amp_b=rng.uniform(0.2, 1.0, N_CHANNELS),
    )


def subject_jitter(seed: int, subject_id: str, profile: SubjectProfile = SOURCE_PROFILE) -> Tuple[np.ndarray, np.ndarray]:
    rng = Rng(seed).child("subject", profile.name, subject_id)
    phase = rng.uniform(0.0, profile.phase_max, N_CHANNELS)
    gain = rng.uniform(profile.gain_low, profile.gain_high, N_CHANNELS)
    return phase, gain


def returning_user_jitter(seed: int, subject_id: str, profile: SubjectProfile) -> Tuple[np.ndarray, np.ndarray]:
    # The writer keeps the phase style drawn for the source device; the gain
    # comes from the device being simulated.
    phase, _ = subject_jitter(seed, subject_id, SOURCE_PROFILE)
    _, gain = subject_jitter(seed, subject_id, profile)
    return phase, gain


def synth_signal(
    params: LetterParams,
    phase: np.ndarray,
    gain: np.ndarray,
    rate_hz: float,
    rng: Rng,
    profile: SubjectProfile = SOURCE_PROFILE,
) -> np.ndarray:
    """One (6, T) recording: gain * (A sin(2 pi f t + phi) + B sin(4 pi f t)) + noise."""
    duration = float(rng.uniform(profile.duration_low, profile.duration_high))
    steps = max(2, int(round(duration * rate_hz)))
    t = np.arange(steps, dtype=np.float64) / rate_hz
    f = params.freq[:, None]
    clean = params.amp_a[:, None] * np.sin(2 * np.pi * f * t + phase[:, None]) + params.amp_b[:, None] * np.sin(
        4 * np.pi * f * t
    )
    noise = rng.normal(0.0, profile.noise_sigma, (N_CHANNELS, steps))
    return gain[:, None] * clean + noise


def synth_generate(
    n_subjects: int,
    n_reps: int,
    rate_hz: float,
    seed: int,
    out_dir: Path | str,
    profile: SubjectProfile | str = SOURCE_PROFILE,
    dataset_name: str | None = None,
    verbose: bool = False,
    same_users: bool = False,
) -> DatasetManifest:
    """Write ``26 * n_subjects * n_reps`` CSV recordings and a manifest.json.

    With ``same_users`` the subjects reuse the source ids and writing
    style, so a target-profile dataset simulates the source writers on a
    second device. Output bytes depend only on the arguments.
    """
    if isinstance(profile, str):
        try:
            profile = PROFILES[profile]
        except KeyError as exc:
            raise ValueError(f"unknown device profile {profile!r}; expected one of {sorted(PROFILES)}") from exc
    if n_subjects < 2:
        raise ValueError(
            f"need at least 2 subjects, got {n_subjects}: leave-one-subject-out evaluation "
            "holds out one subject per fold and trains on the rest"
        )
    if n_reps < 1:
        raise ValueError(f"need at least 1 repetition, got {n_reps}")
    if not rate_hz > 0:
        raise ValueError(f"sampling rate must be positive, got {rate_hz}")

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SclairError(f"cannot create output directory {out}: {exc}") from exc

    width = max(2, len(str(n_subjects)))
    prefix = SOURCE_PROFILE.subject_prefix if same_users else profile.subject_prefix
    subjects = [f"{prefix}{index + 1:0{width}d}" for index in range(n_subjects)]
    jitter = returning_user_jitter if same_users else subject_jitter
    letters = [letter_params(seed, k) for k in range(len(LETTERS))]
    entries: List[ManifestEntry] = []
    for s_index, subject in enumerate(subjects):
        phase, gain = jitter(seed, subject, profile)
        for k, letter in enumerate(LETTERS):
            for rep in range(n_reps):
                rng = Rng(seed).child("recording", profile.name, subject, k, rep)
                signal = synth_signal(letters[k], phase, gain, rate_hz, rng, profile)
                relative = f"{subject}/{letter}_{rep:02d}.csv"
                try:
                    write_recording_csv(out / relative, signal)
                except OSError as exc:
                    raise SclairError(f"cannot write {out / relative}: {exc}") from exc
                entries.append(ManifestEntry(path=relative, subject=subject, label=letter, repetition=rep))
        if verbose:
            print(f"[{s_index + 1}/{n_subjects}] wrote subject {subject}")
    debug_log("synth", f"{len(entries)} recordings at {rate_hz} Hz into {out}")

    suffix = "-same-users" if same_users and profile is not SOURCE_PROFILE else ""
    name = dataset_name or f"synthetic-{profile.name}{suffix}-seed{seed}"
    try:
        return write_manifest(out / "manifest.json", name, rate_hz, entries)
    except OSError as exc:
        raise SclairError(f"cannot write manifest in {out}: {exc}") from exc
