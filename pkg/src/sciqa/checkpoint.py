"""Checkpoint container: a one-line JSON header naming every tensor,
followed by raw little-endian float32 payloads. Round-trips byte-exactly."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .network import Model, ModelConfig

FORMAT_VERSION = 1


def checkpoint_id(model: Model) -> str:
    """Content hash of the tensor payload, used for stage provenance."""
    digest = hashlib.sha256()
    for name in sorted(model.tensors):
        digest.update(name.encode())
        digest.update(_payload(model.tensors[name]))
    return digest.hexdigest()[:16]


def _payload(tensor: np.ndarray) -> bytes:
    if tensor.dtype != np.float32:
        raise ValueError(
            f"checkpoints store float32 tensors only, got {tensor.dtype}")
    return np.ascontiguousarray(tensor, dtype="<f4").tobytes()


def save_checkpoint(model: Model, path: str | Path, meta: dict | None = None) -> str:
    """Write the model to ``path``; returns the checkpoint id."""
    path = Path(path)
    names = sorted(model.tensors)
    payloads = [_payload(model.tensors[n]) for n in names]
    directory = []
    offset = 0
    for name, blob in zip(names, payloads):
        directory.append({"name": name,
                          "shape": list(model.tensors[name].shape),
                          "offset": offset,
                          "nbytes": len(blob)})
        offset += len(blob)
    ckpt_id = checkpoint_id(model)
    header = {
        "format_version": FORMAT_VERSION,
        "id": ckpt_id,
        "config": _config_dict(model.config),
        "tensors": directory,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        handle.write(b"\n")
        for blob in payloads:
            handle.write(blob)
    return ckpt_id


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    """Read a checkpoint; returns (model, header metadata)."""
    path = Path(path)
    with path.open("rb") as handle:
        header_line = handle.readline()
        body = handle.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {header.get('format_version')!r}")
    config = ModelConfig(
        mode=header["config"]["mode"],
        conv_channels=tuple(header["config"]["conv_channels"]),
        fc_width=header["config"]["fc_width"],
        bn_epsilon=header["config"]["bn_epsilon"],
        weight_decay=header["config"]["weight_decay"],
    )
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(body[start:start + nbytes], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    model = Model(config, tensors)
    actual = checkpoint_id(model)
    if actual != header["id"]:
        raise ValueError(
            f"checkpoint {path} is corrupt: payload hash {actual} does not "
            f"match recorded id {header['id']}")
    meta = dict(header["meta"])
    meta["id"] = header["id"]
    return model, meta


def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["conv_channels"] = list(d["conv_channels"])
    return d
