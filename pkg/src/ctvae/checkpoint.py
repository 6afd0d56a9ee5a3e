"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"CTVAECKP"
    version  u16
    hlen     u32      length of the JSON header
    header   hlen bytes, UTF-8 JSON: config, tensor table, optimizer, rng, extra
    payload  concatenated float32 (<f4) tensors in table order
    crc      u32      CRC-32 of every preceding byte

Each tensor table entry carries ``name``, ``shape`` and its own CRC-32, so
a damaged payload is reported by tensor name.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelConfig
from .optim import AdamState

MAGIC = b"CTVAECKP"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointKindError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _tensor_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    tensors = list(ckpt.params.items())
    opt_meta = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt_meta = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step,
                    "names": list(o.m)}
        tensors += [(f"adam.m/{k}", v) for k, v in o.m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in o.v.items()]
    payloads = [_tensor_bytes(a) for _, a in tensors]
    table = [{"name": name, "shape": list(np.shape(a)), "crc32": zlib.crc32(p)}
             for (name, a), p in zip(tensors, payloads)]
    header = {
        "config": ckpt.config.to_dict(),
        "tensors": table,
        "optimizer": opt_meta,
        "rng": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(payloads)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes, expected_kind: str | None = None) -> Checkpoint:
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointIntegrityError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError("bad magic bytes")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointIntegrityError("file checksum mismatch" + _locate_damage(body, hlen))
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    arrays = _read_tensors(body, header, _PREFIX.size + hlen)

    config = ModelConfig.from_dict(header["config"])
    if expected_kind is not None and config.kind != expected_kind:
        raise CheckpointKindError(f"checkpoint holds a {config.kind!r} model, expected {expected_kind!r}")
    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for name in o["names"]:
            optimizer.m[name] = arrays.pop(f"adam.m/{name}").copy()
            optimizer.v[name] = arrays.pop(f"adam.v/{name}").copy()
    params = {k: v.copy() for k, v in arrays.items()}
    return Checkpoint(config, params, optimizer, header["rng"], header["extra"])


def _read_tensors(body: bytes, header: dict, offset: int) -> dict[str, np.ndarray]:
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        chunk = body[offset:offset + n]
        if len(chunk) != n:
            raise CheckpointIntegrityError(f"truncated payload for tensor {entry['name']!r}")
        if zlib.crc32(chunk) != entry["crc32"]:
            raise CheckpointIntegrityError(f"checksum mismatch in tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(entry["shape"])
        offset += n
    if offset != len(body):
        raise CheckpointIntegrityError(f"{len(body) - offset} unexpected trailing bytes")
    return arrays


def _locate_damage(body: bytes, hlen: int) -> str:
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
        _read_tensors(body, header, _PREFIX.size + hlen)
    except CheckpointIntegrityError as exc:
        return f" ({exc})"
    except Exception:  # noqa: BLE001 - header itself unreadable
        return " (header damaged)"
    return ""


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path, expected_kind: str | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected_kind)


def snapshot(model, trainer=None, extra: dict | None = None) -> Checkpoint:
    """Capture a model (and optionally its trainer's optimizer and RNG) as a :class:`Checkpoint`."""
    params = {k: v.data.astype(np.float32) for k, v in model.parameters().items()}
    opt = rng = None
    if trainer is not None:
        opt = trainer.optimizer.state
        rng = trainer.rng.bit_generator.state
        extra = {**(extra or {}), "step": trainer.step}
    return Checkpoint(model.config, params, opt, rng, extra or {})


def restore_params(model, params: dict[str, np.ndarray]) -> None:
    current = model.parameters()
    if set(current) != set(params):
        missing = sorted(set(current) ^ set(params))
        raise CheckpointError(f"parameter names differ from the model: {missing[:5]}")
    for name, p in current.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {p.shape} vs {params[name].shape}")
        p.data = np.array(params[name], dtype=p.data.dtype)
