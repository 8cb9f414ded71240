"""Tests for the binary checkpoint codec and the model bridge."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from sparsekit.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from sparsekit.errors import CheckpointError
from sparsekit.l0 import GateShape
from sparsekit.magnitude import magnitude_prune_step
from sparsekit.masks import MaskedLayer, SparsityMask
from sparsekit.models import LayerOptions, build_lenet300, build_model
from sparsekit.rng import STREAM_INIT, RngState


def _sample() -> Checkpoint:
    keep = np.array([[True, False, True], [False, True, True]])
    return Checkpoint(
        tensors={"fc.weight": np.arange(6, dtype=np.float32).reshape(2, 3)},
        masks={"fc": SparsityMask.from_keep(keep)},
        metadata={"method": "magnitude", "seed": 4},
    )


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class TestCodec:
    """Test encoding and decoding."""

    def test_layout_header(self) -> None:
        blob = encode_checkpoint(_sample())
        assert blob[:4] == b"SPRS"
        assert struct.unpack("<II", blob[4:12]) == (1, 3)

    def test_decode(self) -> None:
        ckpt = decode_checkpoint(encode_checkpoint(_sample()))
        np.testing.assert_array_equal(ckpt.tensors["fc.weight"], _sample().tensors["fc.weight"])
        assert ckpt.masks["fc"] == _sample().masks["fc"]
        assert ckpt.metadata == {"method": "magnitude", "seed": 4}

    def test_empty(self) -> None:
        ckpt = decode_checkpoint(encode_checkpoint(Checkpoint()))
        assert ckpt.tensors == {}
        assert ckpt.masks == {}

    def test_crc_mismatch(self) -> None:
        blob = bytearray(encode_checkpoint(_sample()))
        blob[20] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC"):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self) -> None:
        blob = encode_checkpoint(_sample())
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + blob[4:])

    def test_record_count_past_end(self) -> None:
        body = encode_checkpoint(_sample())[:-4]
        forged = body[:8] + struct.pack("<I", 9) + body[12:]
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(_with_crc(forged))

    def test_unsupported_version(self) -> None:
        body = encode_checkpoint(_sample())[:-4]
        forged = body[:4] + struct.pack("<I", 2) + body[8:]
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(_with_crc(forged))

    def test_trailing_bytes(self) -> None:
        body = encode_checkpoint(_sample())[:-4]
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(_with_crc(body + b"\x00\x00"))

    def test_too_short(self) -> None:
        with pytest.raises(CheckpointError):
            decode_checkpoint(b"SPRS")


class TestFiles:
    """Test reading and writing checkpoint files."""

    def test_save_and_load(self, tmp_path: Path) -> None:
        path = save_checkpoint(tmp_path / "nested" / "run.sprs", _sample())
        assert path.is_file()
        assert load_checkpoint(path).metadata["seed"] == 4

    def test_missing(self, tmp_path: Path) -> None:
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "absent.sprs")


class TestModelBridge:
    """Test capturing and restoring models."""

    def test_restore_magnitude_model(self) -> None:
        model = build_model(build_lenet300("magnitude"), RngState(1, STREAM_INIT).generator())
        layer = model.layers["fc2"]
        assert isinstance(layer, MaskedLayer)
        magnitude_prune_step(layer, 0.75)
        init = {name: value * 0.0 for name, value in model.state_dict().items()}
        options = LayerOptions(gate_shape=GateShape(beta=0.5))
        ckpt = checkpoint_from_model(model, options=options, init_state=init)
        ckpt = decode_checkpoint(encode_checkpoint(ckpt))

        restored, restored_options = restore_model(ckpt)
        assert restored_options.gate_shape.beta == 0.5
        assert restored.test_nonzero() == model.test_nonzero()
        np.testing.assert_array_equal(
            restored.parameters()["fc1.weight"].data, model.parameters()["fc1.weight"].data
        )
        assert set(ckpt.init_weights()) == set(model.state_dict())
        assert all(not name.startswith("init/") for name in ckpt.weights())

    def test_restore_needs_model(self) -> None:
        with pytest.raises(CheckpointError, match="model"):
            restore_model(_sample())
