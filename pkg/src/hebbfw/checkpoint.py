"""Binary checkpoint container for named parameter tensors.

Layout (little-endian)::

    magic      8 bytes  b"HFWCKPT\\0"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    count      u32
    records    count × (name_len u32, name, dtype u8, rank u8, extents u64×rank, payload)
    crc32      u32 over everything between the version field and the checksum

Only learned parameters are written. Fast-weight memory is transient and
has no place in the container.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .backbones import Model, build_model, config_from_dict, config_to_dict

MAGIC = b"HFWCKPT\x00"
VERSION = 1
EXTENSION = ".hfwckpt"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})" if offset is not None else message)


class CheckpointSchemaError(ValueError):
    pass


def encode_tensors(named: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def dumps(model: Model, meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    model_cfg = config_to_dict(model.config)
    meta["model_config"] = model_cfg
    meta.setdefault("config_digest", config_digest(model_cfg))
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    body = struct.pack("<I", len(meta_blob)) + meta_blob
    body += encode_tensors({name: t.data for name, t in model.params.items()})
    head = MAGIC + struct.pack("<I", VERSION)
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, meta: dict | None, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, meta))
    os.replace(tmp, path)
    return path


def parse(blob: bytes) -> tuple[dict, dict[str, np.ndarray], bytes]:
    """Decode a container; returns (meta, tensors, raw tensor section)."""
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}", 8)
    if len(blob) < 16:
        raise CheckpointFormatError("truncated header", len(blob))
    body, (crc,) = blob[12:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checksum mismatch", len(blob) - 4)

    pos = 12

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob) - 4:
            raise CheckpointFormatError(f"truncated record needing {n} bytes", pos)
        out = blob[pos: pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable metadata: {exc}", 16) from None
    tensor_start = pos
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}", pos - 2)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if name in tensors:
            raise CheckpointFormatError(f"duplicate tensor {name}", pos)
        tensors[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(blob) - 4:
        raise CheckpointFormatError("trailing bytes after tensor records", pos)
    return meta, tensors, blob[tensor_start:pos]


def load_checkpoint(path) -> tuple[Model, dict]:
    meta, tensors, _ = parse(Path(path).read_bytes())
    try:
        config = config_from_dict(meta["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointSchemaError(f"checkpoint model config unusable: {exc}") from None
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    model = build_model(config, seed=0, dtype=dtype)
    load_into(model, tensors)
    return model, meta


def load_into(model: Model, tensors: dict[str, np.ndarray]) -> None:
    unknown = sorted(set(tensors) - set(model.params))
    if unknown:
        raise CheckpointSchemaError(f"unknown tensor names in checkpoint: {unknown[:5]}")
    missing = sorted(set(model.params) - set(tensors))
    if missing:
        raise CheckpointSchemaError(f"checkpoint lacks tensors: {missing[:5]}")
    for name, arr in tensors.items():
        target = model.params[name]
        if arr.shape != target.shape:
            raise CheckpointSchemaError(f"{name}: checkpoint shape {arr.shape} vs model {target.shape}")
        target.data = arr.astype(target.dtype, copy=True)


def snapshot(model: Model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.params.items()}
