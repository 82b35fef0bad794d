"""Binary tensor container used for checkpoints and exported latents.

Layout (all integers little-endian)::

    b"VGWF"  u32 version  u32 len  <config JSON, UTF-8, sorted keys>
    u32 n_tensors
    per tensor: u32 name_len  name  u8 dtype (0 = f32, 1 = f64)  u32 rank  u64 dims[rank]  data
    u32 CRC32 of every preceding byte

Tensors are written in sorted name order so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"VGWF"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    version: int = VERSION


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(config: dict, tensors: dict[str, np.ndarray], store: str | None = None) -> bytes:
    """Serialize; ``store`` forces ``"f32"``/``"f64"``, otherwise each array keeps its dtype."""
    if store not in (None, "f32", "f64"):
        raise CheckpointError(f"unknown storage dtype {store!r}")
    blob = canonical_json(config).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if store is not None:
            arr = arr.astype("<f4" if store == "f32" else "<f8")
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype("<f8")
        # astype rather than ascontiguousarray, which would promote 0-d arrays to 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a VGWF file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC32 mismatch (file corrupted)")
    try:
        version, n = struct.unpack_from("<II", body, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported format version {version}")
        off = 12
        config = json.loads(body[off:off + n].decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + ln].decode("utf-8")
            off += ln
            tag, rank = struct.unpack_from("<BI", body, off)
            off += 5
            if tag not in _DTYPES:
                raise CheckpointError(f"{source}: unknown dtype tag {tag} for {name!r}")
            shape = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise CheckpointError(f"{source}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(body):
            raise CheckpointError(f"{source}: {len(body) - off} trailing bytes")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from exc
    return Checkpoint(config, tensors, version)


def save(path, config: dict, tensors: dict[str, np.ndarray], store: str | None = None) -> bytes:
    data = encode(config, tensors, store)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    return data


def load(path, expected_names=None) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    ckpt = decode(data, str(path))
    if expected_names is not None:
        want, got = set(expected_names), set(ckpt.tensors)
        if want != got:
            raise CheckpointError(f"{path}: tensor names differ from the model "
                                  f"(missing {sorted(want - got)[:5]}, extra {sorted(got - want)[:5]})")
    return ckpt
