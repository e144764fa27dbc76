"""Bit-exact on-disk embedding cache.

Layout (all little-endian)::

    b"TSDF" | version u32 | dim u32 | count u64
    count x ( id_len u16 | id utf-8 bytes | dim x float32 )

Records are written in sorted id order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..errors import CorruptFileError, DataError

MAGIC = b"TSDF"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_F32 = np.dtype("<f4")


class EmbeddingStore(Mapping[str, np.ndarray]):
    def __init__(self, ids: list[str], vectors: np.ndarray):
        self.ids = list(ids)
        self.vectors = np.asarray(vectors, dtype=_F32)
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __getitem__(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]

    def __iter__(self) -> Iterator[str]:
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def write_store(path, embeddings: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> EmbeddingStore:
    pairs = list(embeddings.items()) if isinstance(embeddings, Mapping) else list(embeddings)
    ids = [k for k, _ in pairs]
    if len(set(ids)) != len(ids):
        dup = sorted({k for k in ids if ids.count(k) > 1})
        raise DataError(f"duplicate embedding ids: {dup[:5]}")
    if not pairs:
        raise DataError("refusing to write an empty embedding store")
    dims = {np.asarray(v).reshape(-1).size for _, v in pairs}
    if len(dims) != 1:
        raise DataError(f"embeddings have mixed dimensions {sorted(dims)}")
    dim = dims.pop()
    pairs.sort(key=lambda kv: kv[0])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, STORE_VERSION, dim, len(pairs)))
        for key, vec in pairs:
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"embedding id too long: {key[:40]}...")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype=_F32).reshape(-1).tobytes())
    return EmbeddingStore([k for k, _ in pairs], np.stack([np.asarray(v, dtype=_F32).reshape(-1) for _, v in pairs]))


def read_store(path) -> EmbeddingStore:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise CorruptFileError(f"{path}: unsupported store version {version}")
    pos = _HEADER.size
    ids, rows = [], []
    width = 4 * dim
    for _ in range(count):
        if pos + 2 > len(buf):
            raise CorruptFileError(f"{path}: truncated record table")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n + width > len(buf):
            raise CorruptFileError(f"{path}: truncated record table")
        try:
            ids.append(buf[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise CorruptFileError(f"{path}: undecodable id at byte {pos}") from None
        pos += n
        rows.append(np.frombuffer(buf, dtype=_F32, count=dim, offset=pos))
        pos += width
    if pos != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - pos} trailing bytes after {count} records")
    if len(set(ids)) != len(ids):
        raise CorruptFileError(f"{path}: duplicate ids")
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype=_F32)
    return EmbeddingStore(ids, vectors)
