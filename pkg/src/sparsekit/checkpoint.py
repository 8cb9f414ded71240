"""Binary checkpoint codec.

Layout (all integers little-endian)::

    b"SPRS" | u32 version | u32 record count
    record*: u16 name length | name (UTF-8) | u8 dtype | u8 rank | u32 dims[rank] | payload
    u32 CRC-32 of every preceding byte

dtype 1 is float32 (``prod(dims) * 4`` bytes), dtype 2 a bit-packed mask
(``ceil(prod(dims) / 8)`` bytes, little bit order), dtype 3 a UTF-8 JSON
blob of rank 1 whose single dim is its byte length.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from sparsekit.errors import CheckpointError
from sparsekit.l0 import GateShape
from sparsekit.masks import SparsityMask
from sparsekit.models import LayerOptions, Model, ModelSpec, build_model
from sparsekit.rng import RngState

MAGIC = b"SPRS"
VERSION = 1

DTYPE_F32 = 1
DTYPE_MASK = 2
DTYPE_JSON = 3

META_RECORD = "meta"
INIT_PREFIX = "init/"
MASK_SUFFIX = ".mask"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, SparsityMask] = field(default_factory=dict)
    metadata: dict[str, Any] = field(default_factory=dict)

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(INIT_PREFIX)}

    def init_weights(self) -> dict[str, np.ndarray]:
        return {
            k.removeprefix(INIT_PREFIX): v
            for k, v in self.tensors.items()
            if k.startswith(INIT_PREFIX)
        }


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def _record(name: str, dtype: int, dims: tuple[int, ...], payload: bytes) -> bytes:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"record name too long: {name[:40]}...")
    if len(dims) > 0xFF:
        raise CheckpointError(f"{name}: rank {len(dims)} too large")
    header = struct.pack(f"<H{len(encoded)}sBB", len(encoded), encoded, dtype, len(dims))
    return header + struct.pack(f"<{len(dims)}I", *dims) + payload


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    records: list[bytes] = []
    names: set[str] = set()

    def _claim(name: str) -> str:
        if name in names:
            raise CheckpointError(f"duplicate record name {name!r}")
        names.add(name)
        return name

    for name, array in ckpt.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        records.append(_record(_claim(name), DTYPE_F32, tuple(data.shape), data.tobytes()))
    for name, mask in ckpt.masks.items():
        records.append(
            _record(_claim(name + MASK_SUFFIX), DTYPE_MASK, mask.shape, mask.packed.tobytes())
        )
    if ckpt.metadata:
        blob = json.dumps(ckpt.metadata, sort_keys=True, default=str).encode("utf-8")
        records.append(_record(_claim(META_RECORD), DTYPE_JSON, (len(blob),), blob))

    body = MAGIC + struct.pack("<II", VERSION, len(records)) + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, end: int) -> None:
        self.data = data
        self.pos = 0
        self.end = end

    def take(self, size: int) -> bytes:
        if self.pos + size > self.end:
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint too short")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("CRC mismatch")

    reader = _Reader(data, len(data) - 4)
    reader.take(4)
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    ckpt = Checkpoint()
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        if name in seen:
            raise CheckpointError(f"duplicate record name {name!r}")
        seen.add(name)
        dtype, rank = reader.unpack("<BB")
        dims = tuple(int(d) for d in reader.unpack(f"<{rank}I"))
        length = math.prod(dims)
        if dtype == DTYPE_F32:
            payload = reader.take(4 * length)
            array = np.frombuffer(payload, dtype="<f4").astype(np.float32)
            ckpt.tensors[name] = array.reshape(dims)
        elif dtype == DTYPE_MASK:
            bits = np.frombuffer(reader.take((length + 7) // 8), dtype=np.uint8).copy()
            ckpt.masks[name.removesuffix(MASK_SUFFIX)] = SparsityMask(bits, dims)
        elif dtype == DTYPE_JSON:
            ckpt.metadata = json.loads(reader.take(length).decode("utf-8"))
        else:
            raise CheckpointError(f"{name}: unknown dtype code {dtype}")
    if reader.pos != reader.end:
        raise CheckpointError(f"{reader.end - reader.pos} trailing bytes after records")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# Model bridge
# ---------------------------------------------------------------------------


def options_to_json(options: LayerOptions) -> dict[str, Any]:
    payload = asdict(options)
    payload["gate_shape"] = options.gate_shape.model_dump()
    return payload


def options_from_json(payload: dict[str, Any]) -> LayerOptions:
    values = dict(payload)
    values["gate_shape"] = GateShape.model_validate(values.get("gate_shape", {}))
    return LayerOptions(**values)


def checkpoint_from_model(
    model: Model,
    *,
    options: LayerOptions,
    init_state: dict[str, np.ndarray] | None = None,
    metadata: dict[str, Any] | None = None,
) -> Checkpoint:
    tensors = model.state_dict()
    for name, array in (init_state or {}).items():
        tensors[INIT_PREFIX + name] = array
    meta = {
        "model": model.spec.model_dump(mode="json"),
        "options": options_to_json(options),
        **(metadata or {}),
    }
    return Checkpoint(tensors=tensors, masks=model.masks(), metadata=meta)


def restore_model(ckpt: Checkpoint) -> tuple[Model, LayerOptions]:
    """Rebuild the model recorded in ``ckpt`` with its weights and masks."""
    if "model" not in ckpt.metadata:
        raise CheckpointError("checkpoint carries no model description")
    spec = ModelSpec.model_validate(ckpt.metadata["model"])
    options = options_from_json(ckpt.metadata.get("options", {}))
    model = build_model(spec, RngState(0).generator(), options)
    model.load_state(ckpt.weights())
    if ckpt.masks:
        model.set_masks(ckpt.masks, freeze=bool(ckpt.metadata.get("frozen_masks", False)))
    return model, options
