"""Checkpoint persistence.

Layout: a plain-text header terminated by an ``end-header`` line, followed by
the raw little-endian float32 arrays in the order the header declares them::

    MAGIC-CKPT
    version: 1
    config-hash: <sha256 of canonical config JSON>
    content-hash: <sha256 of payload>
    config: <canonical config JSON>
    active-channels: in=<n> out=<n>
    tensor: <name> <d0>x<d1>... <nbytes>
    ...
    end-header
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .config import NetworkConfig
from .errors import (ConfigHashMismatchError, CorruptPayloadError,
                     TruncatedPayloadError, VersionMismatchError)
from .fileio import atomic_write_bytes
from .model import MagicModel, build_model

MAGIC = "MAGIC-CKPT"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def checkpoint_bytes(model: MagicModel) -> bytes:
    cfg = model.config
    arrays = [(name, np.ascontiguousarray(p.data, dtype=_DTYPE)) for name, p in model.params.items()]
    payload = b"".join(a.tobytes() for _, a in arrays)
    lines = [
        MAGIC,
        f"version: {FORMAT_VERSION}",
        f"config-hash: {cfg.hash()}",
        f"content-hash: {hashlib.sha256(payload).hexdigest()}",
        f"config: {cfg.canonical()}",
        f"active-channels: in={cfg.n_active_in} out={cfg.n_active_out}",
    ]
    for name, a in arrays:
        shape = "x".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"tensor: {name} {shape} {a.nbytes}")
    lines.append("end-header")
    return ("\n".join(lines) + "\n").encode("utf-8") + payload


def save_checkpoint(model: MagicModel, path: str | Path) -> Path:
    return atomic_write_bytes(path, checkpoint_bytes(model))


def _parse_header(blob: bytes) -> tuple[dict, list[tuple[str, tuple, int]], int]:
    marker = b"\nend-header\n"
    end = blob.find(marker)
    if not blob.startswith(MAGIC.encode()):
        raise CorruptPayloadError("not a checkpoint file (bad magic line)")
    if end < 0:
        raise TruncatedPayloadError("truncated payload: header terminator missing")
    fields: dict[str, str] = {}
    tensors = []
    for line in blob[:end].decode("utf-8").splitlines()[1:]:
        key, _, value = line.partition(": ")
        if key == "tensor":
            name, shape, nbytes = value.split(" ")
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            tensors.append((name, dims, int(nbytes)))
        else:
            fields[key] = value
    return fields, tensors, end + len(marker)


def load_checkpoint(path: str | Path, config: NetworkConfig | None = None) -> MagicModel:
    """Read a checkpoint; if ``config`` is given, its hash must match."""
    blob = Path(path).read_bytes()
    fields, tensors, start = _parse_header(blob)
    version = fields.get("version")
    if version != str(FORMAT_VERSION):
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    stored = NetworkConfig.from_json(fields["config"])
    if stored.hash() != fields.get("config-hash"):
        raise ConfigHashMismatchError("config-hash mismatch: header config does not match its hash")
    if config is not None and config.hash() != fields["config-hash"]:
        raise ConfigHashMismatchError(
            f"config-hash mismatch: checkpoint is for {stored.name!r}, requested {config.name!r}")
    payload = blob[start:]
    needed = sum(n for _, _, n in tensors)
    if len(payload) < needed:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {needed} bytes present")
    if len(payload) > needed:
        raise CorruptPayloadError(f"payload has {len(payload) - needed} trailing bytes")
    if hashlib.sha256(payload).hexdigest() != fields.get("content-hash"):
        raise CorruptPayloadError("content-hash mismatch: payload corrupted")

    model = build_model(stored.validate(), seed=0)
    offset = 0
    for name, dims, nbytes in tensors:
        if name not in model.params:
            raise CorruptPayloadError(f"unknown tensor {name!r} for this config")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // 4, offset=offset).reshape(dims)
        p = model.params[name]
        if p.data.shape != arr.shape:
            raise CorruptPayloadError(f"tensor {name!r}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(np.float32)
        offset += nbytes
    if len(tensors) != len(model.params):
        raise CorruptPayloadError(f"{len(tensors)} tensors stored, config needs {len(model.params)}")
    return model
