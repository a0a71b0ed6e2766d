"""Binary checkpoint files.

Layout (little-endian throughout)::

    b"FCKP" | u16 version | u32 header length | UTF-8 JSON header | f32 payloads

The header carries the model spec, training config, final epoch, pipeline
seed and a tensor table ``[{name, shape, byte_offset}]``; offsets count
from the first payload byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .model import ModelSpec, Params
from .train import TrainConfig

MAGIC = b"FCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _param_order(name: str) -> tuple[int, str]:
    index, _, kind = name.partition(".")
    return int(index), kind


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Params
    config: TrainConfig = field(default_factory=TrainConfig)
    epoch: int = 0
    seed: int = 0
    version: int = VERSION

    @property
    def task(self):
        return self.spec.task


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.params, key=_param_order)
    table, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "spec": ckpt.spec.to_dict(),
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a checkpoint (bad magic {raw[:4]!r})")
    if len(raw) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{source}: truncated before header length")
    _, version, header_len = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedCheckpointError(f"{source}: truncated inside header")
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        config = TrainConfig.from_dict(header["config"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from None
    payload = memoryview(raw)[start + header_len :]
    params: Params = {}
    for entry in table:
        shape = tuple(int(d) for d in entry["shape"])
        off = int(entry["byte_offset"])
        nbytes = 4 * prod(shape)
        if off < 0 or off + nbytes > len(payload):
            raise TruncatedCheckpointError(f"{source}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(shape)
        params[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(spec, params, config, int(header["epoch"]), int(header["seed"]), version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {str(path)!r}: {exc}") from exc
    return from_bytes(raw, str(path))
