"""Binary checkpoint files.

Layout (little-endian)::

    magic      8 bytes  b"SGLSTMCK"
    version    u32
    length     u64, total file size including the checksum
    meta_len   u32, then meta_len bytes of UTF-8 JSON (dims, config, vocab hash, ...)
    count      u32
    count x    u16 name_len, name, u8 rank, rank x u32 dims, u8 element width
    payloads   raw tensors in manifest order
    checksum   u64, first 8 bytes of BLAKE2b over everything above
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
)
from .network import Dims, ModelParams
from .training import OptimizerState, TrainingConfig

MAGIC = b"SGLSTMCK"
VERSION = 1

_PREFIX = struct.Struct("<IQ")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainingConfig
    vocab_hash: str
    epoch: int = 0
    seed: int = 0
    opt_state: OptimizerState | None = None
    extra: dict = field(default_factory=dict)  # e.g. guiding-feature scheme

    def check_vocab(self, vocab):
        if vocab.hash() != self.vocab_hash:
            raise ConfigurationError(
                f"checkpoint was trained with vocabulary {self.vocab_hash}, got {vocab.hash()}"
            )


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def dumps(ckpt):
    meta = {
        "dims": ckpt.params.dims.to_dict(),
        "config": ckpt.config.to_dict(),
        "vocab_hash": ckpt.vocab_hash,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "step": ckpt.opt_state.step if ckpt.opt_state else None,
        "extra": ckpt.extra,
    }
    named = [(f"param/{n}", t) for n, t in ckpt.params.items()]
    if ckpt.opt_state is not None:
        named += [(f"rms/{n}", t) for n, t in ckpt.opt_state.acc.items()]

    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    body += struct.pack("<I", len(named))
    for name, t in named:
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim)
        body += struct.pack(f"<{t.ndim}I", *t.shape) + struct.pack("<B", t.dtype.itemsize)
    for _, t in named:
        body += np.ascontiguousarray(t, dtype=_DTYPES[t.dtype.itemsize]).tobytes()
    total = len(MAGIC) + _PREFIX.size + len(body) + 8
    out = MAGIC + _PREFIX.pack(VERSION, total) + bytes(body)
    return out + _checksum(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf):
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, total = r.unpack(_PREFIX.format)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    if len(buf) < total:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(buf)} of {total} bytes")
    if len(buf) > total:
        raise CheckpointError("trailing bytes after checksum")
    if _checksum(buf[:-8]) != buf[-8:]:
        raise CheckpointChecksumError("checkpoint checksum mismatch")
    r.buf = buf[:-8]
    try:
        return _parse(r)
    except (CheckpointTruncatedError, ValueError, KeyError, TypeError, struct.error) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _parse(r):
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    manifest = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        (width,) = r.unpack("<B")
        if width not in _DTYPES:
            raise CheckpointError(f"unsupported element width {width} for {name}")
        manifest.append((name, shape, _DTYPES[width]))
    tensors = {}
    for name, shape, dtype in manifest:
        n = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise CheckpointError("unexpected bytes before the checksum")

    dims = Dims(**meta["dims"])
    params = ModelParams(dims, {k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    acc = {k[4:]: v for k, v in tensors.items() if k.startswith("rms/")}
    opt_state = OptimizerState(acc, meta["step"]) if acc else None
    return Checkpoint(
        params,
        TrainingConfig.from_dict(meta["config"]),
        meta["vocab_hash"],
        meta["epoch"],
        meta["seed"],
        opt_state,
        meta.get("extra", {}),
    )


def save_checkpoint(ckpt, path):
    data = dumps(ckpt)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return loads(f.read())
