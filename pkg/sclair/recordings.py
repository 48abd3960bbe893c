"""Recording files and dataset manifests.

A recording is a CSV with the header ``ax,ay,az,gx,gy,gz`` and one row per
timestep. A manifest is a JSON document listing recordings by path
(relative to the manifest), subject, label and repetition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .errors import ManifestError
from .schemas import LETTERS, DatasetManifest, ManifestEntry
from .tensor import Tensor

CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz")


@dataclass
class ImuRecording:
    samples: Tensor  # (6, T), channel order CHANNELS
    sampling_rate_hz: float
    label: str
    subject_id: str
    repetition: int = 0
    source: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(CHANNELS):
            raise ValueError(f"recording must be (6, T), got {self.samples.shape}")
        if self.samples.shape[1] < 1:
            raise ValueError("recording has no timesteps")
        if not self.sampling_rate_hz > 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        label = str(self.label).strip().upper()
        if label not in LETTERS:
            raise ValueError(f"unknown label {self.label!r}")
        self.label = label

    @property
    def length(self) -> int:
        return int(self.samples.shape[1])

    @property
    def label_index(self) -> int:
        return LETTERS.index(self.label)


def read_recording_csv(path: Path) -> Tensor:
    try:
        with open(path, encoding="utf-8") as handle:
            header = handle.readline().strip()
    except FileNotFoundError as exc:
        raise ManifestError(f"recording not found: {path}") from exc
    if header != ",".join(CHANNELS):
        raise ManifestError(f"{path}: header must be exactly {','.join(CHANNELS)!r}, got {header!r}")
    frame = pd.read_csv(path, dtype=np.float64)
    if frame.empty:
        raise ManifestError(f"{path}: recording has no rows")
    return frame[list(CHANNELS)].to_numpy().T.copy()


def write_recording_csv(path: Path, samples: Tensor, float_format: str = "%.6f") -> None:
    frame = pd.DataFrame(np.asarray(samples).T, columns=list(CHANNELS))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


def _entry_label(index: int, raw: object) -> str:
    if isinstance(raw, dict):
        path = raw.get("path", "?")
        return f"entry {index} ({path})"
    return f"entry {index}"


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    manifest_path = Path(path)
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ManifestError(f"{manifest_path}: top level must be an object")

    raw_samples = raw.get("samples")
    if isinstance(raw_samples, list):
        for index, item in enumerate(raw_samples):
            try:
                ManifestEntry.model_validate(item)
            except ValidationError as exc:
                problems = "; ".join(
                    f"{'.'.join(str(part) for part in error['loc']) or 'entry'}: {error['msg']}"
                    for error in exc.errors()
                )
                raise ManifestError(f"{manifest_path}: {_entry_label(index, item)}: {problems}") from exc
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc'])}: {error['msg']}" for error in exc.errors()
        )
        raise ManifestError(f"{manifest_path}: {problems}") from exc

    seen: Dict[Tuple[str, str, int], int] = {}
    for index, entry in enumerate(manifest.samples):
        key = (entry.subject, entry.label, entry.repetition)
        if key in seen:
            raise ManifestError(
                f"{manifest_path}: entry {index} ({entry.path}) duplicates entry {seen[key]} "
                f"for subject={entry.subject} label={entry.label} repetition={entry.repetition}"
            )
        seen[key] = index

    manifest_dir = manifest_path.resolve().parent
    if check_files:
        missing = [entry.path for entry in manifest.samples if not (manifest_dir / entry.path).is_file()]
        if missing:
            listed = ", ".join(missing[:10])
            more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
            raise ManifestError(f"{manifest_path}: missing recording files: {listed}{more}")
    manifest._base_dir = manifest_dir
    return manifest


def manifest_base_dir(manifest: DatasetManifest) -> Path:
    return manifest._base_dir or Path.cwd()


def iter_recordings(manifest: DatasetManifest) -> Iterator[ImuRecording]:
    base_dir = manifest_base_dir(manifest)
    for entry in manifest.samples:
        path = base_dir / entry.path
        yield ImuRecording(
            samples=read_recording_csv(path),
            sampling_rate_hz=manifest.sampling_rate_hz,
            label=entry.label,
            subject_id=entry.subject,
            repetition=entry.repetition,
            source=str(path),
        )


def load_recordings(manifest: DatasetManifest) -> List[ImuRecording]:
    return list(iter_recordings(manifest))


def write_manifest(
    path: Path, dataset_name: str, sampling_rate_hz: float, entries: Iterable[ManifestEntry]
) -> DatasetManifest:
    manifest = DatasetManifest(
        dataset_name=dataset_name,
        sampling_rate_hz=sampling_rate_hz,
        samples=list(entries),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.model_dump(), indent=2) + "\n", encoding="utf-8")
    manifest._base_dir = path.resolve().parent
    return manifest
