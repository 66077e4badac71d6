"""Binary checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes  b"CXRVCKPT"
    version      u32
    total_size   u64      length of the whole file, checksum included
    header_size  u32
    header       JSON (utf-8): metadata plus the name and shape of every blob
    blobs        per blob: u64 element count, then float32 LE values
    sha256       32 bytes over everything before it

Blobs are the model parameters in registry order followed by the
optimizer's first and second moments.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes

MAGIC = b"CXRVCKPT"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQI")
_DIGEST = 32


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSizeError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    params: dict[str, np.ndarray]
    opt_m: list[np.ndarray] = field(default_factory=list)
    opt_v: list[np.ndarray] = field(default_factory=list)
    opt_step: int = 0
    epoch: int = 0
    val_accuracy: float = 0.0
    rng_state: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    version: int = VERSION


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def dumps(ckpt: Checkpoint) -> bytes:
    blobs = [(name, _f32(a)) for name, a in ckpt.params.items()]
    blobs += [(f"adam_m.{i}", _f32(a)) for i, a in enumerate(ckpt.opt_m)]
    blobs += [(f"adam_v.{i}", _f32(a)) for i, a in enumerate(ckpt.opt_v)]
    header = {
        "kind": ckpt.kind,
        "model_config": ckpt.model_config,
        "epoch": ckpt.epoch,
        "val_accuracy": ckpt.val_accuracy,
        "opt_step": ckpt.opt_step,
        "rng_state": ckpt.rng_state,
        "augment": ckpt.augment,
        "num_params": len(ckpt.params),
        "num_moments": len(ckpt.opt_m),
        "blobs": [[name, list(a.shape)] for name, a in blobs],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    for _, a in blobs:
        body += struct.pack("<Q", a.size)
        body += a.tobytes()
    total = _PREAMBLE.size + len(head) + len(body) + _DIGEST
    out = bytearray(_PREAMBLE.pack(MAGIC, VERSION, total, len(head)))
    out += head
    out += body
    out += hashlib.sha256(out).digest()
    return bytes(out)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREAMBLE.size + _DIGEST:
        raise CheckpointSizeError(f"file is {len(data)} bytes, shorter than the fixed preamble")
    magic, version, total, head_size = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointVersionError(f"unknown checkpoint version {version}; this build reads {VERSION}")
    if total != len(data):
        raise CheckpointSizeError(f"file is {len(data)} bytes but its preamble declares {total}")
    if hashlib.sha256(data[:-_DIGEST]).digest() != data[-_DIGEST:]:
        raise CheckpointChecksumError("checksum mismatch; the file is corrupt")
    pos = _PREAMBLE.size
    header = json.loads(data[pos : pos + head_size].decode("utf-8"))
    pos += head_size
    end = len(data) - _DIGEST
    arrays = []
    for name, shape in header["blobs"]:
        if pos + 8 > end:
            raise CheckpointSizeError(f"blob {name} is truncated")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if count != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointSizeError(f"blob {name}: {count} values stored for shape {shape}")
        if pos + 4 * count > end:
            raise CheckpointSizeError(f"blob {name} is truncated")
        arrays.append((name, np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).copy()))
        pos += 4 * count
    if pos != end:
        raise CheckpointSizeError(f"{end - pos} unexpected trailing bytes before the checksum")
    n_params, n_moments = header["num_params"], header["num_moments"]
    params = dict(arrays[:n_params])
    moments = [a for _, a in arrays[n_params:]]
    return Checkpoint(
        kind=header["kind"],
        model_config=header["model_config"],
        params=params,
        opt_m=moments[:n_moments],
        opt_v=moments[n_moments:],
        opt_step=header["opt_step"],
        epoch=header["epoch"],
        val_accuracy=header["val_accuracy"],
        rng_state=header["rng_state"],
        augment=header["augment"],
        version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    return atomic_write_bytes(path, dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(data)
