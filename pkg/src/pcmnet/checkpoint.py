"""Checkpoint files.

Layout (little-endian)::

    b"PCMC" | version:u16
    config_len:u32 | RunConfig text (utf-8, key=value lines)
    vocab_len:u32  | caption vocabulary words (utf-8, newline separated)
    n_tensors:u32
    n_tensors x ( name_len:u16 | name | ndim:u8 | ndim x u32 | float64 data )
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from pcmnet.config import ARCHITECTURE_KEYS, RunConfig
from pcmnet.errors import ConfigError, FormatError
from pcmnet.tokenizer import SPECIALS, Vocabulary

MAGIC = b"PCMC"
VERSION = 1


def save_checkpoint(path, cfg: RunConfig, vocab: Vocabulary, params: dict[str, np.ndarray]) -> None:
    cfg_bytes = cfg.to_text().encode("utf-8")
    vocab_bytes = "\n".join(vocab.tokens[len(SPECIALS):]).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION),
             struct.pack("<I", len(cfg_bytes)), cfg_bytes,
             struct.pack("<I", len(vocab_bytes)), vocab_bytes,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, expect: RunConfig | None = None):
    """Return ``(cfg, vocab, params)``; refuses architecture mismatches with ``expect``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (n,) = r.unpack("<I", "config length")
    cfg = RunConfig.from_text(r.take(n, "config").decode("utf-8"))
    (n,) = r.unpack("<I", "vocabulary length")
    words = r.take(n, "vocabulary").decode("utf-8")
    vocab = Vocabulary(words.split("\n") if words else [])
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "tensor rank")
        shape = r.unpack(f"<{ndim}I", "tensor shape")
        size = int(np.prod(shape, dtype=np.int64))
        raw = r.take(8 * size, f"tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes", offset=r.pos)
    if expect is not None:
        bad = cfg.diff(expect, ARCHITECTURE_KEYS)
        if bad:
            detail = ", ".join(f"{k} (checkpoint {getattr(cfg, k)!r}, requested {getattr(expect, k)!r})"
                               for k in bad)
            raise ConfigError(f"checkpoint config mismatch: {detail}")
    return cfg, vocab, params
