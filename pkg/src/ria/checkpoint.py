"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    8 bytes   magic  b"RIACKPT\\x00"
    u32       format version (1)
    u32       config JSON length, then that many UTF-8 bytes (sorted keys)
    u32       parameter count
    per parameter, in registry order:
        u16   name length, name bytes (UTF-8)
        u8    dtype code (1 = float32, 2 = float64)
        u8    ndim, then ndim x u32 extents
        raw   row-major little-endian buffer
    32 bytes  SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .config import RiaConfig
from .errors import ContractError

MAGIC = b"RIACKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def dumps(named_params, cfg: RiaConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg_blob)))
    buf.write(cfg_blob)
    named_params = list(named_params)
    buf.write(struct.pack("<I", len(named_params)))
    for name, tensor in named_params:
        data = tensor.data
        raw_name = name.encode()
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _CODES[data.dtype], data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype=_DTYPES[_CODES[data.dtype]]).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> tuple[RiaConfig, dict[str, np.ndarray]]:
    if len(blob) < 48 or blob[:8] != MAGIC:
        raise ContractError("not a checkpoint (bad magic)", "ria-train")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContractError("checkpoint checksum mismatch", "ria-train")
    view = memoryview(body)
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}", "ria-train")
    (cfg_len,) = take("<I")
    cfg = RiaConfig.from_dict(json.loads(bytes(view[pos:pos + cfg_len]).decode()))
    pos += cfg_len
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        params[name] = np.frombuffer(bytes(view[pos:pos + nbytes]), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    return cfg, params


def save_checkpoint(path: str | Path, model) -> bytes:
    blob = dumps(model.named_parameters(), model.cfg)
    Path(path).write_bytes(blob)
    return blob


def load_state(model, params: dict[str, np.ndarray]) -> None:
    named = dict(model.named_parameters())
    if set(named) != set(params):
        missing = sorted(set(named) ^ set(params))
        raise ContractError(f"checkpoint/model parameter mismatch: {missing[:5]}", "ria-train")
    for name, tensor in named.items():
        if tensor.shape != params[name].shape:
            raise ContractError(f"shape mismatch for {name}: {tensor.shape} vs {params[name].shape}", "ria-train")
        tensor.data[...] = params[name]


def load_checkpoint(path: str | Path):
    """Rebuild the model described by a checkpoint file."""
    from .model import RiaModel

    cfg, params = loads(Path(path).read_bytes())
    model = RiaModel(cfg)
    load_state(model, params)
    return model
