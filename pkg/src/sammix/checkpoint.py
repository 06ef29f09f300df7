"""Versioned checkpoint blobs: named parameter grids plus a JSON manifest.

Layout: a single UTF-8 JSON line (manifest), then the raw little-endian
payload.  The manifest carries name, dtype, shape, offset, and a frozen or
trainable flag for every entry, plus arbitrary metadata (configs, optimizer
scalars, RNG state).  Writing the same arrays twice produces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1

_DTYPES = {"<f4", "<f8", "<i8", "|u1"}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Manifest is malformed (not JSON, missing fields, bad dtype)."""


class CheckpointVersionError(CheckpointError):
    """format_version not supported by this code."""


class CheckpointIntegrityError(CheckpointError):
    """Payload contradicts the manifest (sizes, offsets)."""


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    trainable: dict[str, bool]
    meta: dict


def _canonical_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype
    if kind == np.float32:
        return "<f4"
    if kind == np.float64:
        return "<f8"
    if kind == np.int64:
        return "<i8"
    if kind == np.uint8:
        return "|u1"
    raise CheckpointFormatError(f"unsupported checkpoint dtype {kind}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    payload = bytearray()
    for name in sorted(ckpt.arrays):
        # not ascontiguousarray: that would promote 0-d scalars to shape (1,)
        arr = np.asarray(ckpt.arrays[name])
        dtype = _canonical_dtype(arr)
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": [int(d) for d in arr.shape],
                "offset": len(payload),
                "nbytes": len(raw),
                "trainable": bool(ckpt.trainable.get(name, True)),
            }
        )
        payload.extend(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "entries": entries,
        "meta": ckpt.meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(bytes(payload))


def load_checkpoint_meta(path: str | Path) -> dict:
    """Read just the manifest's meta block (cheap completion checks)."""
    try:
        with open(path, "rb") as fh:
            line = fh.readline()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        manifest = json.loads(line.decode("utf-8"))
        version = manifest["format_version"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format_version {version!r}")
    return meta


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointFormatError(f"{path}: no manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
        version = manifest["format_version"]
        entries = manifest["entries"]
        meta = manifest["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed manifest: {exc}") from exc
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format_version {version!r}")
    payload = raw[newline + 1 :]
    arrays: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    for e in entries:
        try:
            name, dtype, shape = e["name"], e["dtype"], tuple(int(d) for d in e["shape"])
            offset, nbytes = int(e["offset"]), int(e["nbytes"])
            flag = bool(e["trainable"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: malformed entry {e!r}: {exc}") from exc
        if dtype not in _DTYPES:
            raise CheckpointFormatError(f"{path}: entry {name!r} has unknown dtype {dtype!r}")
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if expected != nbytes:
            raise CheckpointIntegrityError(
                f"{path}: entry {name!r} shape {shape} implies {expected} bytes, manifest says {nbytes}"
            )
        if offset < 0 or offset + nbytes > len(payload):
            raise CheckpointIntegrityError(
                f"{path}: entry {name!r} spans [{offset}, {offset + nbytes}) outside payload of {len(payload)} bytes"
            )
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset).reshape(shape).copy()
        trainable[name] = flag
    return Checkpoint(arrays=arrays, trainable=trainable, meta=meta)
