"""Model checkpoint files.

Layout (little-endian)::

    b"TLMODEL1"
    u32 config length, config JSON (UTF-8, sorted keys)
    u32 group count
    per group: u16 name length, name, u8 ndim, u32 dims..., float32 payload
    u64 FNV-1a digest of every preceding byte

Tokenizer value-normalization statistics are stored as ``norm.*`` groups.
Frozen cache rows are not stored; their digests are recorded in the config
and checked when the model is rebuilt.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import TokenizerSpec
from .kernels import fnv1a64
from .model import ModelConfig, SequenceClassifier

MAGIC = b"TLMODEL1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict          # name -> float32 array

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.config == other.config and list(self.tensors) == list(other.tensors)
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def from_model(model: SequenceClassifier, vocab_size: int | None = None, extra: dict | None = None) -> Checkpoint:
    tok = model.tokenizer
    frozen = {k: fnv1a64(np.ascontiguousarray(v).tobytes()) for k, v in tok.frozen.items()}
    config = {
        "model": model.cfg.as_dict(),
        "tokenizer": tok.spec.to_fields(),
        "vocab_size": int(vocab_size if vocab_size is not None else tok.vocab_size),
        "frozen_digests": {k: f"{v:016x}" for k, v in frozen.items()},
    }
    if extra:
        config["extra"] = extra
    tensors = {name: np.asarray(v, np.float32) for name, v in model.params.items()}
    tensors["norm.value_mean"] = np.asarray(tok.value_mean, np.float32)
    tensors["norm.value_std"] = np.asarray(tok.value_std, np.float32)
    return Checkpoint(config, tensors)


def to_model(ckpt: Checkpoint, resources=None, dtype=np.float32) -> SequenceClassifier:
    cfg = ModelConfig(**ckpt.config["model"])
    spec = TokenizerSpec.from_fields(ckpt.config["tokenizer"])
    model = SequenceClassifier.init(cfg, spec, ckpt.config["vocab_size"], np.random.default_rng(0),
                                    dtype, resources)
    params = model.params
    names = set(ckpt.tensors) - {"norm.value_mean", "norm.value_std"}
    if names != set(params):
        raise CheckpointError("checkpoint parameter groups do not match the configuration")
    for name in params:
        model.set_param(name, ckpt.tensors[name].astype(dtype))
    tok = model.tokenizer
    tok.value_mean = ckpt.tensors["norm.value_mean"].astype(dtype)
    tok.value_std = ckpt.tensors["norm.value_std"].astype(dtype)
    for k, v in tok.frozen.items():
        if f"{fnv1a64(np.ascontiguousarray(v).tobytes()):016x}" != ckpt.config["frozen_digests"].get(k):
            raise CheckpointError(f"frozen array {k} does not match the checkpoint digest")
    return model


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a TLMODEL1 checkpoint")
    (digest,) = struct.unpack_from("<Q", data, len(data) - 8)
    body = memoryview(data)[:-8]
    if fnv1a64(body) != digest:
        raise CheckpointError("checkpoint digest mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, body, pos)
        pos += size
        return out

    def raw(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        out = bytes(body[pos:pos + n])
        pos += n
        return out

    (n_cfg,) = take("<I")
    try:
        config = json.loads(raw(n_cfg).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    (n_groups,) = take("<I")
    tensors = {}
    for _ in range(n_groups):
        (n_name,) = take("<H")
        name = raw(n_name).decode()
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"duplicate parameter group {name}")
        tensors[name] = arr
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter groups")
    return Checkpoint(config, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
