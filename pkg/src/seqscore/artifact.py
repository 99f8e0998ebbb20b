"""Versioned binary model container.

Layout: 8-byte magic "ETRNNV01", a little-endian uint64 metadata length, a
UTF-8 JSON metadata block (model config, schema, provenance, blob directory
with name/offset/rows/cols), then the parameter blobs as little-endian
IEEE-754 32-bit values, row-major, in directory order. Training stays 64-bit;
storage down-converts to 32-bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import SchemaSpec
from .model import ModelConfig, ModelParameters, init_parameters

MAGIC = b"ETRNNV01"
FORMAT_VERSION = 1


class ArtifactError(ValueError):
    """Corrupt, truncated or mismatched model file."""


@dataclass
class ModelArtifact:
    config: ModelConfig
    params: ModelParameters
    provenance: dict = field(default_factory=dict)

    @property
    def schema(self) -> SchemaSpec:
        return self.config.schema


def save_model(artifact: ModelArtifact, path) -> None:
    params = artifact.params.all_parameters()
    directory = []
    offset = 0
    blobs = []
    for p in params:
        rows, cols = p.value.shape
        blob = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        directory.append({"name": p.name, "offset": offset, "rows": rows, "cols": cols})
        offset += len(blob)
        blobs.append(blob)
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": json.loads(artifact.config.to_json()),
        "schema": json.loads(artifact.schema.to_json()),
        "provenance": artifact.provenance,
        "blobs": directory,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_model(path) -> ModelArtifact:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise ArtifactError(f"{path}: bad magic (not a model file)")
    (meta_len,) = struct.unpack_from("<Q", data, len(MAGIC))
    meta_start = len(MAGIC) + 8
    if len(data) < meta_start + meta_len:
        raise ArtifactError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(data[meta_start:meta_start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: unreadable metadata block: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format version {meta.get('format_version')}")

    schema = SchemaSpec.from_json(json.dumps(meta["schema"]))
    config = ModelConfig.from_json(json.dumps(meta["model_config"]), schema)
    params = init_parameters(config)
    by_name = {p.name: p for p in params.all_parameters()}
    blob_start = meta_start + meta_len
    seen = set()
    for entry in meta["blobs"]:
        name, rows, cols = entry["name"], entry["rows"], entry["cols"]
        if name not in by_name:
            raise ArtifactError(f"{path}: blob directory names unknown parameter {name!r}")
        p = by_name[name]
        if p.value.shape != (rows, cols):
            raise ArtifactError(
                f"{path}: blob {name} has shape ({rows}, {cols}), "
                f"config expects {p.value.shape}"
            )
        start = blob_start + entry["offset"]
        end = start + rows * cols * 4
        if end > len(data):
            raise ArtifactError(f"{path}: truncated blob section at {name}")
        p.value[...] = np.frombuffer(data[start:end], dtype="<f4").reshape(rows, cols)
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise ArtifactError(f"{path}: blob directory is missing parameters {sorted(missing)}")
    return ModelArtifact(config, params, meta.get("provenance", {}))
