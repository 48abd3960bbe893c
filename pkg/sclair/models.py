from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np

from .errors import SclairError, ShapeError
from .layers import L2Norm, LayerSpec, Sequential, build_layer
from .schemas import N_CLASSES, EncoderArch
from .tensor import Rng, Tensor, softmax_stable

INPUT_SHAPE = (6, 155)
PROJ_DIM = 128
DROPOUT_RATE = 0.5

BundleForm = Literal["inference", "stage1"]


def _conv_specs(arch: EncoderArch, pattern: str) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    for symbol in pattern:
        if symbol == "p":
            specs.append(LayerSpec(kind="maxpool1d", pool=arch.pool_size))
            continue
        filters = arch.n1 if symbol == "a" else arch.n2
        specs.append(LayerSpec(kind="conv1d", filters=filters, kernel=arch.kernel))
        specs.append(LayerSpec(kind="relu"))
    return specs


def encoder_specs(arch: EncoderArch) -> List[LayerSpec]:
    if arch.tag == "cnn1d":
        return _conv_specs(arch, arch.conv_pattern) + [LayerSpec(kind="gap")]
    if arch.tag == "lstm":
        return [LayerSpec(kind="lstm", units=arch.lstm_units)]
    if arch.tag == "bilstm":
        return [LayerSpec(kind="bilstm", units=arch.lstm_units)]
    recurrent = "lstm" if arch.tag == "cnn1d_lstm" else "bilstm"
    return _conv_specs(arch, arch.recurrent_front) + [LayerSpec(kind=recurrent, units=arch.lstm_units)]


def _format_trace(specs: List[LayerSpec], trace: List[Tuple[int, ...]]) -> str:
    parts = [f"input{trace[0]}"]
    for spec, shape in zip(specs, trace[1:]):
        parts.append(f"{spec.kind}{shape}")
    return " -> ".join(parts)


def build_encoder(arch: EncoderArch, input_shape: Tuple[int, ...] = INPUT_SHAPE, rng: Rng | None = None):
    """Return ``(encoder, d_e, length_trace)`` for ``arch``.

    Raises ShapeError with the shape trace built so far when the input is
    too short for the convolution stack.
    """
    rng = rng or Rng(0)
    specs = encoder_specs(arch)
    encoder_rng = rng.child("encoder", arch.tag)
    trace: List[Tuple[int, ...]] = [tuple(input_shape)]
    layers = []
    for index, spec in enumerate(specs):
        layer = build_layer(spec, trace[-1], encoder_rng.child("layer", index, spec.kind))
        try:
            trace.append(layer.output_shape(trace[-1]))
        except ShapeError as exc:
            raise ShapeError(f"{exc}; length trace: {_format_trace(specs, trace)} -> {spec.kind}(?)") from exc
        layers.append(layer)
    encoder = Sequential(layers)
    d_e = int(trace[-1][0])
    return encoder, d_e, trace


def build_projection(d_e: int, proj_dim: int, rng: Rng, normalize_z: bool = True) -> Sequential:
    specs = [LayerSpec(kind="dense", units=proj_dim), LayerSpec(kind="relu")]
    if normalize_z:
        specs.append(LayerSpec(kind="l2norm", on_zero="uniform"))
    projection, _ = Sequential.from_specs(specs, (d_e,), rng.child("projection"))
    return projection


def build_classifier(d_e: int, rng: Rng, dropout_rate: float = DROPOUT_RATE) -> Sequential:
    specs = [LayerSpec(kind="dropout", rate=dropout_rate), LayerSpec(kind="dense", units=N_CLASSES)]
    classifier, _ = Sequential.from_specs(specs, (d_e,), rng.child("classifier"))
    return classifier


@dataclass
class ModelBundle:
    arch: EncoderArch
    encoder: Sequential
    d_e: int
    classifier: Sequential
    projection: Optional[Sequential] = None
    proj_dim: int = PROJ_DIM
    normalize_r: bool = True
    normalize_z: bool = True
    dropout_rate: float = DROPOUT_RATE
    input_shape: Tuple[int, ...] = INPUT_SHAPE
    provenance: Dict[str, Any] = field(default_factory=dict)
    r_norm: L2Norm = field(default_factory=L2Norm, repr=False)

    @property
    def form(self) -> BundleForm:
        return "stage1" if self.projection is not None else "inference"

    def named_params(self, include_projection: bool = True) -> Dict[str, Tensor]:
        params = {f"encoder.{name}": value for name, value in self.encoder.params.items()}
        if include_projection and self.projection is not None:
            params.update({f"projection.{name}": value for name, value in self.projection.params.items()})
        params.update({f"classifier.{name}": value for name, value in self.classifier.params.items()})
        return params


def build_bundle(
    arch: EncoderArch,
    rng: Rng,
    *,
    with_projection: bool = True,
    proj_dim: int = PROJ_DIM,
    normalize_r: bool = True,
    normalize_z: bool = True,
    dropout_rate: float = DROPOUT_RATE,
    input_shape: Tuple[int, ...] = INPUT_SHAPE,
    provenance: Dict[str, Any] | None = None,
) -> ModelBundle:
    encoder, d_e, _ = build_encoder(arch, input_shape, rng)
    projection = build_projection(d_e, proj_dim, rng, normalize_z) if with_projection else None
    return ModelBundle(
        arch=arch,
        encoder=encoder,
        d_e=d_e,
        classifier=build_classifier(d_e, rng, dropout_rate),
        projection=projection,
        proj_dim=proj_dim,
        normalize_r=normalize_r,
        normalize_z=normalize_z,
        dropout_rate=dropout_rate,
        input_shape=tuple(input_shape),
        provenance=dict(provenance or {}),
    )


def _as_batch(x: Tensor, expected: Tuple[int, ...]) -> Tuple[Tensor, bool]:
    x = np.asarray(x)
    if x.ndim == len(expected):
        x, single = x[None], True
    else:
        single = False
    if x.shape[1:] != tuple(expected):
        raise ShapeError(f"expected samples of shape {tuple(expected)}, got {x.shape[1:]}")
    return x, single


def encode(bundle: ModelBundle, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
    batch, single = _as_batch(x, bundle.input_shape)
    r = bundle.encoder.forward(batch, training=training, rng=rng)
    if bundle.normalize_r:
        r = bundle.r_norm.forward(r)
    return r[0] if single else r


def project(bundle: ModelBundle, r: Tensor) -> Tensor:
    if bundle.projection is None:
        raise SclairError("project() needs a stage-1 bundle; this one has no projection head")
    batch, single = _as_batch(r, (bundle.d_e,))
    z = bundle.projection.forward(batch)
    return z[0] if single else z


def classifier_logits(bundle: ModelBundle, r: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
    batch, _ = _as_batch(r, (bundle.d_e,))
    if training and rng is None:
        raise SclairError("training-mode classification needs an Rng for dropout")
    return bundle.classifier.forward(batch, training=training, rng=rng)


def classify(bundle: ModelBundle, r: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
    single = np.asarray(r).ndim == 1
    probs = softmax_stable(classifier_logits(bundle, r, training, rng), axis=1)
    return probs[0] if single else probs


def predict(bundle: ModelBundle, x: Tensor, batch_size: int = 128) -> np.ndarray:
    x = np.asarray(x)
    out = []
    for start in range(0, x.shape[0], batch_size):
        probs = classify(bundle, encode(bundle, x[start:start + batch_size]))
        out.append(np.argmax(probs, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def param_count(bundle: ModelBundle, form: BundleForm = "inference") -> int:
    total = bundle.encoder.param_count() + bundle.classifier.param_count()
    if form == "stage1":
        if bundle.projection is None:
            raise SclairError("stage-1 parameter count requested for a bundle without a projection head")
        total += bundle.projection.param_count()
    return total


def projection_param_count(bundle: ModelBundle) -> int:
    return bundle.projection.param_count() if bundle.projection is not None else 0


def discard_projection(bundle: ModelBundle) -> ModelBundle:
    if bundle.projection is None:
        warnings.warn("projection head already discarded; nothing to do", stacklevel=2)
        return bundle
    bundle.projection = None
    bundle.provenance["projection_discarded"] = True
    return bundle


def reset_classifier(bundle: ModelBundle, rng: Rng) -> None:
    bundle.classifier = build_classifier(bundle.d_e, rng, bundle.dropout_rate)


def encoder_sha256(bundle: ModelBundle) -> str:
    digest = hashlib.sha256()
    for name, value in bundle.encoder.params.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return digest.hexdigest()
