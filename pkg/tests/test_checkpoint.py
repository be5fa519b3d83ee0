import struct

import numpy as np
import pytest

from polyvis.harness.checkpoint import (
    MAGIC,
    CheckpointError,
    DigestMismatch,
    ShapeMismatch,
    VersionMismatch,
    checkpoint_bytes,
    load_into,
    parse_checkpoint,
    restore,
    save_checkpoint,
)
from polyvis.harness.experiment import build_model, micro_config


@pytest.fixture
def model():
    m = build_model(micro_config(seed=4))
    m.fusion["mlp2.w"].data += 0.25  # something other than the init
    return m


def test_round_trip_bit_exact(model, tmp_path):
    cfg = micro_config(seed=4)
    path = save_checkpoint(model, cfg, tmp_path / "a.bin")
    back = load_into(path, cfg)
    assert back.digests() == model.digests()
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.data.dtype == b.data.dtype and np.array_equal(a.data, b.data)
    assert checkpoint_bytes(back, cfg) == path.read_bytes()


def test_float32_round_trip():
    m = build_model(micro_config(seed=4).replace(precision="float32"))
    ck = parse_checkpoint(checkpoint_bytes(m))
    assert ck.digests() == m.digests()
    assert ck.tensors["lm.head.w"].data.dtype == np.float32


def test_truncated_and_corrupted(model):
    blob = checkpoint_bytes(model)
    with pytest.raises(DigestMismatch):
        parse_checkpoint(blob[:-100])
    bad = bytearray(blob)
    bad[200] ^= 1
    with pytest.raises(DigestMismatch):
        parse_checkpoint(bytes(bad))
    with pytest.raises(DigestMismatch):
        parse_checkpoint(b"short")


def test_version_mismatch(model):
    import hashlib

    body = bytearray(checkpoint_bytes(model)[:-32])
    struct.pack_into("<I", body, len(MAGIC), 99)
    blob = bytes(body) + hashlib.sha256(body).digest()
    with pytest.raises(VersionMismatch, match="99"):
        parse_checkpoint(blob)
    assert issubclass(VersionMismatch, CheckpointError)


def test_shape_mismatch_names_group(model):
    cfg = micro_config(seed=4).replace(decoder__d_model=12, fusion__d_model=12, fusion__d_hidden=12, decoder__n_heads=2)
    other = build_model(cfg)
    with pytest.raises(ShapeMismatch, match="group lm"):
        restore(other, parse_checkpoint(checkpoint_bytes(model)))


def test_config_recorded(model):
    cfg = micro_config(seed=4)
    ck = parse_checkpoint(checkpoint_bytes(model, cfg))
    assert ck.config == cfg.to_dict() and ck.version == 1
