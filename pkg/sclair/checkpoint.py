"""Versioned binary checkpoints.

Layout: ``b"SCLR"``, u8 version, u32 little-endian header length, a UTF-8
JSON header, then float32 little-endian tensor payloads in the order of the
header's tensor directory. Offsets in the directory are relative to the
start of the payload area.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter, ValidationError

from . import __version__
from .errors import CheckpointError
from .models import ModelBundle, build_bundle
from .schemas import EncoderArch
from .tensor import Rng, get_dtype

MAGIC = b"SCLR"
VERSION = 1
_PREAMBLE = struct.Struct("<4sBI")


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(ge=0)


_DIRECTORY = TypeAdapter(List[TensorEntry])


def _directory(bundle: ModelBundle) -> List[Dict[str, Any]]:
    entries = []
    offset = 0
    for name, value in bundle.named_params().items():
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += int(value.size) * 4
    return entries


def checkpoint_header(bundle: ModelBundle) -> Dict[str, Any]:
    return {
        "format_version": VERSION,
        "sclair_version": __version__,
        "arch": bundle.arch.model_dump(),
        "d_e": bundle.d_e,
        "form": bundle.form,
        "proj_dim": bundle.proj_dim,
        "normalize_r": bundle.normalize_r,
        "normalize_z": bundle.normalize_z,
        "dropout_rate": bundle.dropout_rate,
        "input_shape": list(bundle.input_shape),
        "provenance": bundle.provenance,
        "tensors": _directory(bundle),
    }


def save_checkpoint(bundle: ModelBundle, path: Path | str) -> int:
    header = checkpoint_header(bundle)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "wb") as handle:
            handle.write(_PREAMBLE.pack(MAGIC, VERSION, len(header_bytes)))
            handle.write(header_bytes)
            for value in bundle.named_params().values():
                handle.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {target}: {exc}") from exc
    return target.stat().st_size


def _read_header(data: bytes, source: str) -> tuple[Dict[str, Any], int]:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    if len(data) < start + header_len:
        raise CheckpointError(f"{source}: truncated header ({len(data) - start} of {header_len} bytes)")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from exc
    if not isinstance(header, dict) or "tensors" not in header or "arch" not in header:
        raise CheckpointError(f"{source}: header is missing the arch or tensor directory")
    return header, start + header_len


def load_checkpoint(path: Path | str) -> ModelBundle:
    source = str(path)
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {source}") from exc
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {source}: {exc}") from exc

    header, payload_start = _read_header(data, source)
    try:
        arch = EncoderArch.model_validate(header["arch"])
        bundle = build_bundle(
            arch,
            Rng(0),
            with_projection=header.get("form") == "stage1",
            proj_dim=int(header.get("proj_dim", 128)),
            normalize_r=bool(header.get("normalize_r", True)),
            normalize_z=bool(header.get("normalize_z", True)),
            dropout_rate=float(header.get("dropout_rate", 0.5)),
            input_shape=tuple(header.get("input_shape", (6, 155))),
            provenance=header.get("provenance") or {},
        )
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{source}: header does not describe a buildable model ({exc})") from exc

    params = bundle.named_params()
    try:
        directory = _DIRECTORY.validate_python(header["tensors"])
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or 'tensors'}: {error['msg']}" for error in exc.errors()
        )
        raise CheckpointError(f"{source}: malformed tensor directory ({problems})") from exc
    names = [entry.name for entry in directory]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise CheckpointError(f"{source}: tensor directory disagrees with the architecture (missing {missing}, extra {extra})")

    payload = memoryview(data)[payload_start:]
    for entry in directory:
        name = entry.name
        expected = params[name].shape
        shape = tuple(entry.shape)
        if shape != expected:
            raise CheckpointError(f"{source}: tensor {name} has shape {shape} in the header, model expects {expected}")
        count = int(np.prod(shape, dtype=np.int64))
        start = entry.offset
        end = start + 4 * count
        if start < 0 or end > len(payload):
            raise CheckpointError(f"{source}: truncated payload for {name} (needs bytes {start}..{end}, have {len(payload)})")
        values = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        params[name][...] = values.astype(get_dtype())
    return bundle
