"""Versioned binary checkpoint format.

Layout: one JSON manifest line (UTF-8, terminated by a newline) followed by
a raw little-endian float32 payload. The manifest records the format
version, the model configuration, each array's name/shape/byte offset, the
payload length and its SHA-256 checksum, plus an optional `extra` dict for
scalar training state. Round-trips are bit-exact for float32 arrays.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import (
    CheckpointError,
    ChecksumMismatchError,
    FormatVersionError,
    ShapeMismatchError,
)
from .metamodel import ModelConfig, ModelParams

FORMAT_NAME = "tailsid-checkpoint"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(
    params: ModelParams,
    config: ModelConfig,
    path,
    extra: dict | None = None,
    aux_arrays: dict[str, np.ndarray] | None = None,
) -> str:
    """Write params (plus optional auxiliary arrays, e.g. optimizer moments)
    and return the payload checksum."""
    arrays: list[tuple[str, np.ndarray]] = list(params.items())
    if aux_arrays:
        arrays += list(aux_arrays.items())
    chunks: list[bytes] = []
    entries = []
    offset = 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    checksum = hashlib.sha256(payload).hexdigest()
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "model_config": dataclasses.asdict(config),
        "n_model_arrays": len(params),
        "arrays": entries,
        "payload_nbytes": len(payload),
        "payload_sha256": checksum,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    _atomic_write(path, head + payload)
    return checksum


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.readline()
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"not a {FORMAT_NAME} file: {path}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported format_version {manifest.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    return manifest


def _load_arrays(path, manifest) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        fh.readline()
        payload = fh.read()
    if len(payload) != manifest["payload_nbytes"]:
        raise ChecksumMismatchError(
            f"payload truncated: expected {manifest['payload_nbytes']} bytes, "
            f"got {len(payload)}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise ChecksumMismatchError("payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        lo, nbytes = entry["offset"], entry["nbytes"]
        if lo < 0 or lo + nbytes > len(payload):
            raise ShapeMismatchError(name, "offset outside payload")
        if int(np.prod(shape)) * _DTYPE.itemsize != nbytes:
            raise ShapeMismatchError(
                name, f"declared shape {list(shape)} does not match {nbytes} bytes"
            )
        flat = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=lo)
        arr = flat.reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"array {name!r} contains non-finite entries")
        arrays[name] = arr
    return arrays


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    """Model parameters and configuration; auxiliary arrays are skipped."""
    manifest = read_manifest(path)
    arrays = _load_arrays(path, manifest)
    names = [e["name"] for e in manifest["arrays"]][: manifest["n_model_arrays"]]
    params = {name: arrays[name] for name in names}
    config = ModelConfig(**manifest["model_config"])
    return params, config


def load_full_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    """All stored arrays (model plus auxiliary) with the manifest extras."""
    manifest = read_manifest(path)
    arrays = _load_arrays(path, manifest)
    config = ModelConfig(**manifest["model_config"])
    return arrays, config, manifest.get("extra", {})
