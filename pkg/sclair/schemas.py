from __future__ import annotations

import string
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, PrivateAttr, field_validator, model_validator

LETTERS = tuple(string.ascii_uppercase)
N_CLASSES = len(LETTERS)

ArchTag = Literal["cnn1d", "lstm", "bilstm", "cnn1d_lstm", "cnn1d_bilstm"]

# CLI spellings follow the architecture names used in result tables.
ARCH_ALIASES: Dict[str, str] = {
    "1dcnn": "cnn1d",
    "lstm": "lstm",
    "bilstm": "bilstm",
    "1dcnn-lstm": "cnn1d_lstm",
    "1dcnn-bilstm": "cnn1d_bilstm",
}


class ManifestEntry(BaseModel):
    path: str
    subject: str
    label: str
    repetition: int

    @field_validator("subject", mode="before")
    @classmethod
    def _coerce_subject(cls, value: Any) -> str:
        if value is None or not str(value).strip():
            raise ValueError("subject must be a non-empty string")
        return str(value).strip()

    @field_validator("label", mode="before")
    @classmethod
    def _normalize_label(cls, value: Any) -> str:
        text = str(value or "").strip().upper()
        if text not in LETTERS:
            raise ValueError(f"unknown label {value!r}; expected a letter A-Z")
        return text

    @property
    def label_index(self) -> int:
        return LETTERS.index(self.label)


class DatasetManifest(BaseModel):
    dataset_name: str
    sampling_rate_hz: float = Field(..., gt=0)
    samples: List[ManifestEntry] = Field(..., min_length=1)
    _base_dir: Optional[Path] = PrivateAttr(default=None)

    @property
    def subjects(self) -> List[str]:
        return sorted({entry.subject for entry in self.samples})


class PreprocessConfig(BaseModel):
    target_hz: float = Field(default=62.0, gt=0)
    length: int = Field(default=155, ge=1)
    truncate: Literal["head", "tail"] = "head"
    pad: Literal["tail", "head"] = "tail"
    zscore_before_pad: bool = False
    eps: float = 1e-8


class EncoderArch(BaseModel):
    tag: ArchTag = "cnn1d"
    n1: int = Field(default=100, ge=1)
    n2: int = Field(default=160, ge=1)
    kernel: int = Field(default=10, ge=1)
    lstm_units: int = Field(default=256, ge=1)
    pool_size: int = Field(default=2, ge=1)
    # a: conv with n1 filters, b: conv with n2 filters, p: max-pool
    conv_pattern: str = "aapbb"
    recurrent_front: str = "aap"

    @field_validator("conv_pattern", "recurrent_front")
    @classmethod
    def _check_pattern(cls, value: str) -> str:
        value = value.strip().lower()
        if not value or set(value) - {"a", "b", "p"}:
            raise ValueError(f"layer pattern may only use 'a', 'b' and 'p', got {value!r}")
        return value

    @classmethod
    def from_flag(cls, flag: str, **overrides: Any) -> "EncoderArch":
        tag = ARCH_ALIASES.get(flag, flag)
        return cls(tag=tag, **overrides)


class TrainConfig(BaseModel):
    loss_mode: Literal["scl", "ce"] = "scl"
    arch: EncoderArch = Field(default_factory=EncoderArch)
    tau: float = 0.1
    proj_dim: int = Field(default=128, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    patience: int = 5
    min_delta: float = Field(default=0.0, ge=0)
    val_ratio: float = 0.2
    seed: int = 0
    dropout_rate: float = Field(default=0.5, ge=0, lt=1)
    normalize_r: bool = True
    normalize_z: bool = True
    restore_best: bool = True
    warm_start_head: bool = False
    balanced_batches: bool = False
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)

    @model_validator(mode="after")
    def _check_invariants(self) -> "TrainConfig":
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.val_ratio < 1.0:
            raise ValueError(f"val_ratio must lie strictly between 0 and 1, got {self.val_ratio}")
        if self.patience < 1:
            raise ValueError(f"patience must be at least 1, got {self.patience}")
        if self.loss_mode == "scl" and self.batch_size < 2:
            raise ValueError("scl training needs batch_size >= 2")
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: Optional[float] = None
    skipped_anchors: int = 0
    dropped_batches: int = 0


class TrainHistory(BaseModel):
    stage: Literal["stage1", "stage2", "ce", "finetune"]
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: Optional[float] = None
    stopped_early: bool = False
    restored_best: bool = False

    @property
    def skipped_anchors(self) -> int:
        return sum(record.skipped_anchors for record in self.epochs)


class GradcheckResult(BaseModel):
    component: str
    seed: int
    groups: Dict[str, float] = Field(default_factory=dict)
    max_rel_error: float = 0.0
    tolerance: float
    passed: bool


class GradcheckSuiteReport(BaseModel):
    version: str
    seed: int = 0
    arch: Optional[str] = None
    tolerance: float
    checks: List[GradcheckResult] = Field(default_factory=list)
    passed: bool = True


class ConfusionPair(BaseModel):
    pair: Tuple[str, str]
    count: int
    percent: float


class EvalReport(BaseModel):
    version: str
    config: Dict[str, Any] = Field(default_factory=dict)
    mean_accuracy: float
    pooled_accuracy: float
    per_subject: Dict[str, float] = Field(default_factory=dict)
    confusion: List[List[int]]
    top_confusions: List[ConfusionPair] = Field(default_factory=list)
    skipped_anchors: int = 0
    sample_count: int = 0
    wall_clock_s: float = 0.0
    encoder_sha256: Optional[str] = None
    folds: List[Dict[str, Any]] = Field(default_factory=list)


class TrainReport(BaseModel):
    version: str
    config: Dict[str, Any]
    dataset_name: str
    train_samples: int
    val_samples: int
    histories: List[TrainHistory]
    param_count_inference: int
    param_count_stage1: int
    proj_params: int
    encoder_sha256: str
    val_accuracy: Optional[float] = None
    wall_clock_s: float = 0.0


class TransferReport(BaseModel):
    version: str
    config: Dict[str, Any]
    source_model: str
    source_form: Literal["inference", "stage1"] = "inference"
    encoder_sha256: str
    setting: Literal["user_independent", "user_dependent"] = "user_independent"
    shared_subjects: List[str] = Field(default_factory=list)
    zero_shot: Optional[EvalReport] = None
    finetuned: EvalReport
