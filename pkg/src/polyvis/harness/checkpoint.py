"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"PVXCKPT\\0"
    version u32
    count   u32      number of tensor records
    meta    u32 length + UTF-8 JSON (originating config, group digests)
    record  * count:
        name  u16 length + UTF-8
        group u8 length + UTF-8
        frozen u8
        dtype u8 (0 = float32, 1 = float64)
        ndim u8, then ndim * u32 dims
        raw values, little-endian
    sha256 of everything above, 32 bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..model import PolyExpertModel, group_digest
from ..numerics import ParamTensor

MAGIC = b"PVXCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict
    group_digests: dict[str, str]
    tensors: dict[str, ParamTensor]

    def groups(self) -> dict[str, list[ParamTensor]]:
        out: dict[str, list[ParamTensor]] = {}
        for p in self.tensors.values():
            out.setdefault(p.group, []).append(p)
        return out

    def digests(self) -> dict[str, str]:
        return {g: group_digest(ps) for g, ps in self.groups().items()}


def _config_dict(config) -> dict:
    if config is None:
        return {}
    return config if isinstance(config, dict) else config.to_dict()


def checkpoint_bytes(model: PolyExpertModel, config=None) -> bytes:
    params = model.parameters()
    meta = json.dumps({"config": _config_dict(config), "group_digests": model.digests()}, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(params))
    out += struct.pack("<I", len(meta)) + meta
    for p in params:
        name, group = p.name.encode(), p.group.encode()
        arr = np.ascontiguousarray(p.data)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{p.name}: unsupported dtype {arr.dtype}")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", len(group)) + group
        out += struct.pack("<BBB", int(p.frozen), code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(_DTYPES[code], copy=False).tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def save_checkpoint(model: PolyExpertModel, config, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, config))
    return path


def parse_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + 32:
        raise DigestMismatch("file too short to carry a digest")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestMismatch("whole-file digest does not match (truncated or corrupted file)")
    if body[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, count = struct.unpack_from("<II", body, pos)
    pos += 8
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    (mlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos : pos + mlen].decode())
    pos += mlen
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode()
        pos += nlen
        (glen,) = struct.unpack_from("<B", body, pos)
        pos += 1
        group = body[pos : pos + glen].decode()
        pos += glen
        frozen, code, ndim = struct.unpack_from("<BBB", body, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        tensors[name] = ParamTensor(arr.astype(dt.newbyteorder("="), copy=True), name, group, bool(frozen))
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last record")
    ckpt = Checkpoint(version, meta.get("config", {}), meta.get("group_digests", {}), tensors)
    if ckpt.digests() != ckpt.group_digests:
        bad = sorted(g for g in ckpt.group_digests if ckpt.digests().get(g) != ckpt.group_digests[g])
        raise DigestMismatch(f"group digests disagree for {bad}")
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def restore(model: PolyExpertModel, ckpt: Checkpoint) -> PolyExpertModel:
    """Copy checkpoint values into ``model`` after checking every shape."""
    params = model.named_parameters()
    errors = []
    for name, p in params.items():
        src = ckpt.tensors.get(name)
        if src is None:
            errors.append(f"{p.group}: {name} missing from checkpoint")
        elif src.data.shape != p.data.shape:
            errors.append(f"group {p.group}: {name} has shape {src.data.shape}, model expects {p.data.shape}")
    extra = sorted(set(ckpt.tensors) - set(params))
    if extra:
        errors.append(f"checkpoint carries unknown tensors {extra[:5]}")
    if errors:
        raise ShapeMismatch("; ".join(errors))
    for name, p in params.items():
        p.data = ckpt.tensors[name].data.astype(p.data.dtype, copy=True)
        p.frozen = ckpt.tensors[name].frozen
        p.zero_grad()
    return model


def load_into(path, config) -> PolyExpertModel:
    """Build a model from ``config`` and fill it from the checkpoint at ``path``."""
    from .experiment import build_model

    return restore(build_model(config), load_checkpoint(path))
