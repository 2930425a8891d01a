"""Named-tensor checkpoint container with an embedded JSON config block.

Layout (little-endian)::

    "ABCK" | u16 version | u16 reserved | u32 config_len | config JSON (UTF-8)
    | u32 tensor_count | per tensor: u16 name_len | name | ABT1 tensor record
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .data import decode_tensor, encode_tensor
from .errors import (
    BadMagicError,
    ConfigurationError,
    FormatError,
    MissingTensorError,
    TruncationError,
    VersionMismatchError,
)
from .fleet import FleetParams, V2XConfig, init_fleet, named_tensors
from .qformer import MotionQformerConfig
from .rng import Rng

CKPT_MAGIC = b"ABCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")


@dataclass
class Checkpoint:
    params: FleetParams
    model: MotionQformerConfig
    v2x: V2XConfig
    train: dict = field(default_factory=dict)
    version: int = CKPT_VERSION

    def tensors(self):
        return named_tensors(self.params)


def _config_block(ckpt: Checkpoint) -> bytes:
    doc = {
        "format_version": ckpt.version,
        "model": dataclasses.asdict(ckpt.model),
        "v2x": ckpt.v2x.to_json(),
        "train": ckpt.train,
    }
    return json.dumps(doc, sort_keys=True).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    config = _config_block(ckpt)
    parts = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(config)), config]
    tensors = ckpt.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name, node in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(node.value))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def _need(buf: bytes, at: int, n: int, what: str) -> None:
    if len(buf) < at + n:
        raise TruncationError(f"checkpoint truncated reading {what}: need {at + n} bytes, have {len(buf)}")


def parse_checkpoint(buf: bytes, v2x: V2XConfig | None = None) -> Checkpoint:
    head = bytes(buf[:4])
    if head != CKPT_MAGIC[: len(head)]:
        raise BadMagicError(f"bad checkpoint magic {head!r}")
    _need(buf, 0, _HEADER.size, "header")
    _magic, version, _reserved, config_len = _HEADER.unpack_from(buf)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    at = _HEADER.size
    _need(buf, at, config_len, "config block")
    doc = json.loads(bytes(buf[at : at + config_len]).decode("utf-8"))
    at += config_len
    model = MotionQformerConfig(**doc["model"])
    stored_v2x = V2XConfig.from_json(doc["v2x"])
    if v2x is not None and v2x != stored_v2x:
        raise ConfigurationError(
            f"checkpoint head takes {stored_v2x.flat_dim(model.N_Q, model.D)} features for {stored_v2x.to_json()}, "
            f"but {v2x.to_json()} needs {v2x.flat_dim(model.N_Q, model.D)}"
        )
    _need(buf, at, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, at)
    at += 4
    stored = {}
    for _ in range(count):
        _need(buf, at, 2, "tensor name length")
        (name_len,) = struct.unpack_from("<H", buf, at)
        at += 2
        _need(buf, at, name_len, "tensor name")
        name = bytes(buf[at : at + name_len]).decode("utf-8")
        at += name_len
        stored[name], at = decode_tensor(buf, at)
    if at != len(buf):
        raise FormatError(f"checkpoint has {len(buf) - at} trailing bytes")

    # the template fixes names, shapes, tying and freezing; values are overwritten
    params = init_fleet(model, stored_v2x, Rng(0))
    for name, node in named_tensors(params).items():
        if name not in stored:
            raise MissingTensorError(f"checkpoint lacks tensor {name!r}")
        value = stored.pop(name)
        if value.shape != node.shape:
            raise ConfigurationError(f"tensor {name!r} has shape {value.shape}, config implies {node.shape}")
        node.value = value
        node.zero_grad()
    if stored:
        raise FormatError(f"checkpoint has unexpected tensors {sorted(stored)}")
    return Checkpoint(params, model, stored_v2x, doc.get("train", {}), version)


def load_checkpoint(path, v2x: V2XConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``v2x`` given, refuse one trained for another configuration."""
    return parse_checkpoint(Path(path).read_bytes(), v2x)
