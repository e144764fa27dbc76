"""Versioned binary checkpoints shared by the MAE encoder and the aggregator.

Layout (little-endian)::

    b"TSDF" | version u32 | config_len u32 | config JSON (utf-8)
    n_tensors u32
    n_tensors x ( name_len u16 | ndim u8 | name | ndim x u32 dims | float32 data )

Tensors appear in the model's ``state_dict`` order: parameters in
construction order, then buffers. The config JSON always carries ``kind``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError

MAGIC = b"TSDF"
CHECKPOINT_VERSION = 1
_F32 = np.dtype("<f4")


def save_checkpoint(path, kind: str, config: dict, state: dict[str, np.ndarray]) -> None:
    cfg = json.dumps({"kind": kind, **config}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    try:
        if buf[:4] != MAGIC:
            raise CorruptFileError(f"{path}: bad magic {buf[:4]!r}")
        version, cfg_len = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        config = json.loads(buf[pos:pos + cfg_len].decode("utf-8"))
        if not isinstance(config, dict) or "kind" not in config:
            raise CorruptFileError(f"{path}: config block lacks 'kind'")
        pos += cfg_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            n, ndim = struct.unpack_from("<HB", buf, pos)
            pos += 3
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 4 * size > len(buf):
                raise CorruptFileError(f"{path}: truncated tensor {name!r}")
            state[name] = np.frombuffer(buf, dtype=_F32, count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable checkpoint ({exc})") from None
    if pos != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - pos} trailing bytes")
    kind = config.pop("kind")
    return kind, config, state
