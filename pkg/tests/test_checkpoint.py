import struct
import zlib
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caid.checkpoint import (
    Checkpoint, CheckpointError, ChecksumError, TruncatedError, VersionError, config_hash, dumps,
    load_checkpoint, loads, save_checkpoint,
)
from caid.networks import build_model


def small_ckpt():
    rng = np.random.default_rng(0)
    tensors = OrderedDict([
        ("encoder.w", rng.standard_normal((3, 2, 3, 3)).astype(np.float32)),
        ("bias", rng.standard_normal(4).astype(np.float32)),
        ("scalar", np.array(1.5, np.float32)),
        ("naïve.unicode", np.zeros((0, 2), np.float32)),
    ])
    return Checkpoint(tensors, epoch=7, val_loss=0.25, config_hash=config_hash({"a": 1}))


def assert_same(a, b):
    assert list(a.tensors) == list(b.tensors)
    for k in a.tensors:
        assert a.tensors[k].shape == b.tensors[k].shape
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
    assert (a.epoch, a.config_hash) == (b.epoch, b.config_hash)
    assert np.float32(a.val_loss) == np.float32(b.val_loss)


def test_round_trip(tmp_path):
    ck = small_ckpt()
    save_checkpoint(ck, tmp_path / "x.caid")
    assert_same(ck, load_checkpoint(tmp_path / "x.caid"))


def test_round_trip_full_model():
    state = build_model("moco_v2", seed=1).state_dict()
    back = loads(dumps(Checkpoint(state)))
    assert all(back.tensors[k].tobytes() == np.asarray(v, np.float32).tobytes() for k, v in state.items())


def test_layout_header():
    blob = dumps(small_ckpt())
    assert blob[:4] == b"CAID"
    assert struct.unpack("<I", blob[4:8])[0] == 1
    assert blob[8:40] == config_hash({"a": 1})
    assert struct.unpack("<I", blob[40:44])[0] == 4 + 2
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    (nlen,) = struct.unpack("<H", blob[44:46])
    assert blob[46 : 46 + nlen] == b"encoder.w"
    assert blob[46 + nlen : 48 + nlen] == bytes([0, 4])


def test_dumps_deterministic():
    assert dumps(small_ckpt()) == dumps(small_ckpt())


def test_config_hash_canonical():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_corrupt_payload_byte():
    blob = bytearray(dumps(small_ckpt()))
    blob[80] ^= 0x01
    with pytest.raises(ChecksumError):
        loads(bytes(blob))


def test_version_error():
    blob = bytearray(dumps(small_ckpt()))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionError, match="99"):
        loads(bytes(blob))


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOPE" + dumps(small_ckpt())[4:])


def test_truncation():
    blob = dumps(small_ckpt())
    for n in (6, 30, 50, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError):
            loads(blob[:n])
    with pytest.raises(TruncatedError):
        loads(blob[: len(blob) // 2])


def test_trailing_bytes():
    with pytest.raises(CheckpointError):
        loads(dumps(small_ckpt()) + b"\0")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=12), st.lists(st.integers(0, 4), max_size=3)),
                max_size=5, unique_by=lambda t: t[0]),
       st.integers(-1, 10_000), st.floats(allow_nan=False, width=32))
def test_round_trip_property(specs, epoch, val):
    rng = np.random.default_rng(0)
    tensors = OrderedDict((name, rng.standard_normal(shape).astype(np.float32)) for name, shape in specs
                          if not name.startswith("meta."))
    ck = Checkpoint(tensors, epoch, val, bytes(range(32)))
    assert_same(ck, loads(dumps(ck)))
