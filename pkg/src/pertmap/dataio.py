"""Binary file formats: dataset batches and model checkpoints.

Batch files are little-endian: an 8-byte magic, u32 gene count d, u32 row
count n, u32 kind (0 observational, 1 interventional), the d-float32
treatment code, then n*d float32 values in row-major order.  A dataset
directory holds one file per condition plus ``manifest.json``.

Checkpoints are a single file: magic, u32 header length, a JSON header
(format version plus the model configuration), then name-length-prefixed
entries of shape-prefixed float32 tensors in parameter order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import ParameterSet
from .errors import InvalidArgumentError
from .model import ModelConfig

DATASET_MAGIC = b"PMAPDS1\x00"
CHECKPOINT_MAGIC = b"PMAPCK1\x00"
KIND_OBSERVATIONAL = 0
KIND_INTERVENTIONAL = 1


def write_batch_file(path: Path, values: np.ndarray, kind: int, treatment_code: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    code = np.ascontiguousarray(treatment_code, dtype="<f4")
    n, d = values.shape
    if code.shape != (d,):
        raise InvalidArgumentError("treatment code length must equal the gene count")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", d, n, kind))
        fh.write(code.tobytes())
        fh.write(values.tobytes())


def read_batch_file(path: Path) -> tuple[np.ndarray, int, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != DATASET_MAGIC:
            raise InvalidArgumentError(f"{path}: not a dataset batch file")
        d, n, kind = struct.unpack("<III", fh.read(12))
        code = np.frombuffer(fh.read(4 * d), dtype="<f4").astype(np.float64)
        values = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d).astype(np.float64)
    return values, kind, code


def write_manifest(path: Path, manifest: dict[str, Any]) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path) -> dict[str, Any]:
    return json.loads(path.read_text())


def save_checkpoint(path: Path, params: ParameterSet, model_cfg: ModelConfig, extra: dict | None = None) -> None:
    header = {"format": 1, "model_config": asdict(model_cfg)}
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise InvalidArgumentError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != 1:
            raise InvalidArgumentError(f"unsupported checkpoint format {header.get('format')}")
        values: dict[str, np.ndarray] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            values[name] = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    cfg = ModelConfig(**header["model_config"])
    return values, cfg, header.get("extra", {})


def restore_params(values: dict[str, np.ndarray], model_cfg: ModelConfig, build_seed: int = 0) -> ParameterSet:
    """Materialize a ParameterSet with the checkpoint's tensor values."""
    from .model import build_model

    params = build_model(model_cfg, seed=build_seed)
    if set(values) != set(params.names()):
        raise InvalidArgumentError("checkpoint parameters do not match the model configuration")
    params.load_values(values)
    return params
