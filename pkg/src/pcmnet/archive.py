"""Binary embedding archives.

Layout (little-endian)::

    b"PCME" | version:u16 | count:u32 | dim:u32
    count x ( id_len:u16 | id:utf-8 | dim x float64 )

Image bundles are split over two archives sharing record ids: one with the
global features (``dim = D_g``) and one with the flattened patch grid
(``dim = N_I * D_p``).
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from pcmnet.embedding_space import CaptionEmbedding, FeatureBundle
from pcmnet.errors import ConfigError, FormatError

MAGIC = b"PCME"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_IDLEN = struct.Struct("<H")


def store_archive(path, records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    items = list(records.items() if isinstance(records, Mapping) else records)
    if not items:
        raise ValueError("refusing to write an empty archive")
    dim = int(np.asarray(items[0][1]).size)
    chunks = [_HEADER.pack(MAGIC, VERSION, len(items), dim)]
    for rid, vec in items:
        vec = np.asarray(vec, dtype="<f8").ravel()
        if vec.size != dim:
            raise ConfigError(f"record {rid!r} has {vec.size} values, archive dim is {dim}")
        raw = rid.encode("utf-8")
        chunks += [_IDLEN.pack(len(raw)), raw, vec.tobytes()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_archive(path, expected_dim: int | None = None) -> "OrderedDict[str, np.ndarray]":
    """Read every record; raises before returning anything if the file is bad."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if expected_dim is not None and dim != expected_dim:
        raise ConfigError(f"{path}: archive dim {dim} does not match configured dim {expected_dim}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = _HEADER.size
    nbytes = 8 * dim
    for _ in range(count):
        if pos + _IDLEN.size > len(data):
            raise FormatError(f"{path}: truncated record header", offset=pos)
        (n,) = _IDLEN.unpack_from(data, pos)
        pos += _IDLEN.size
        if pos + n + nbytes > len(data):
            raise FormatError(f"{path}: truncated record", offset=pos)
        try:
            rid = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: record id is not utf-8", offset=pos) from exc
        pos += n
        out[rid] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes", offset=pos)
    return out


def store_bundles(global_path, patch_path, bundles: Iterable[FeatureBundle]) -> None:
    bundles = list(bundles)
    store_archive(global_path, [(b.image_id, b.global_feature) for b in bundles])
    store_archive(patch_path, [(b.image_id, b.patches) for b in bundles])


def load_bundles(global_path, patch_path, d_global: int, n_patches: int,
                 d_patch: int) -> "OrderedDict[str, FeatureBundle]":
    globals_ = load_archive(global_path, expected_dim=d_global)
    patches = load_archive(patch_path, expected_dim=n_patches * d_patch)
    if list(globals_) != list(patches):
        raise FormatError(f"{global_path} and {patch_path} hold different image ids")
    return OrderedDict(
        (rid, FeatureBundle(g, patches[rid].reshape(n_patches, d_patch), rid))
        for rid, g in globals_.items())


def store_captions(path, captions: Iterable[CaptionEmbedding]) -> None:
    store_archive(path, [(c.caption_id, c.global_feature) for c in captions])


def load_captions(path, d_global: int) -> "OrderedDict[str, CaptionEmbedding]":
    return OrderedDict((rid, CaptionEmbedding(v, rid))
                       for rid, v in load_archive(path, expected_dim=d_global).items())


class ArchiveTextProvider:
    """Text embeddings looked up by exact string from an archive (e.g. a real-CLIP export)."""

    def __init__(self, records: Mapping[str, np.ndarray]):
        self.records = dict(records)

    @classmethod
    def from_file(cls, path, d_global: int | None = None) -> "ArchiveTextProvider":
        return cls(load_archive(path, expected_dim=d_global))

    def embed_text(self, text: str) -> np.ndarray:
        try:
            return self.records[text]
        except KeyError:
            raise KeyError(f"no embedding stored for {text!r}") from None
