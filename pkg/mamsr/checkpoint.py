"""
Checkpoint files.

Layout (all integers little-endian):
    b"MAMN" | version u32 = 1 | manifest length u64 | manifest (UTF-8 JSON) | payload

The manifest holds the network config, the RGB mean used for input
normalization and the ordered (name, shape) list of tensors. The payload is
every tensor as little-endian float32, concatenated in manifest order.
"""
import json
import math
import os
import struct
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from mamsr.model import ModelParams, NetworkConfig, param_shapes

MAGIC = b"MAMN"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    code = 1


class BadMagicError(CheckpointError):
    code = 10


class UnsupportedVersionError(CheckpointError):
    code = 11


class LengthMismatchError(CheckpointError):
    code = 12


class ShapeMismatchError(CheckpointError):
    code = 13


class Checkpoint(NamedTuple):
    params: ModelParams
    cfg: NetworkConfig
    rgb_mean: Optional[np.ndarray]


def _manifest(params: ModelParams, cfg: NetworkConfig, rgb_mean: Optional[Sequence[float]]) -> dict:
    return {
        "config": cfg.model_dump(mode="json"),
        "rgb_mean": None if rgb_mean is None else [float(v) for v in rgb_mean],
        "tensors": [[name, list(params[name].shape)] for name in params.names()],
    }


def save_checkpoint(params: ModelParams, cfg: NetworkConfig, path, rgb_mean: Optional[Sequence[float]] = None):
    """Write params and cfg to path; the file is replaced atomically."""
    expected = param_shapes(cfg)
    actual = [(name, params[name].shape) for name in params.names()]
    if actual != expected:
        raise ShapeMismatchError("parameters do not match the network config")

    manifest = json.dumps(_manifest(params, cfg, rgb_mean), indent=2).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for name in params.names():
            fh.write(np.ascontiguousarray(params[name], dtype=_PAYLOAD_DTYPE).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise LengthMismatchError(f"{path}: truncated header")
    _, version, manifest_len = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    payload_start = _HEADER.size + manifest_len
    if payload_start > len(data):
        raise LengthMismatchError(f"{path}: manifest runs past the end of the file")

    try:
        manifest = json.loads(data[_HEADER.size:payload_start].decode("utf-8"))
        cfg = NetworkConfig.model_validate(manifest["config"])
        entries = [(name, tuple(shape)) for name, shape in manifest["tensors"]]
        for name, shape in entries:
            if not isinstance(name, str) or not all(type(d) is int and d >= 0 for d in shape):
                raise ValueError(f"bad tensor entry {name!r}: {list(shape)}")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from e

    payload = data[payload_start:]
    expected_bytes = _PAYLOAD_DTYPE.itemsize * sum(math.prod(shape) for _, shape in entries)
    if len(payload) != expected_bytes:
        raise LengthMismatchError(f"{path}: payload has {len(payload)} bytes, manifest describes {expected_bytes}")
    if entries != param_shapes(cfg):
        raise ShapeMismatchError(f"{path}: tensor list does not match the stored network config")

    values, offset = {}, 0
    for name, shape in entries:
        size = math.prod(shape)
        values[name] = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=size, offset=offset * 4).astype(np.float32).reshape(shape)
        offset += size

    rgb_mean = manifest.get("rgb_mean")
    return Checkpoint(ModelParams(values), cfg, None if rgb_mean is None else np.array(rgb_mean, dtype=np.float64))
