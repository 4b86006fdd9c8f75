"""STCK checkpoints: little-endian tensor container plus a ``.cfg`` sidecar.

Layout: ``b"STCK"``, version u32, tensor count u32, then per tensor a u16 name
length, UTF-8 name, dtype u8 (0 = f32, 1 = f64), rank u8, u64 dims and the
raw row-major data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError

MAGIC = b"STCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def write_tensors(path, tensors) -> None:
    """``tensors``: iterable of ``(name, ndarray)``."""
    items = list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())


def read_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CorruptionError(f"{path}: not an STCK checkpoint")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CorruptionError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CorruptionError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (n,) = take("<H")
        name = data[off:off + n].decode("utf-8")
        off += n
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise CorruptionError(f"{path}: bad dtype code {code} for {name}")
        dims = take(f"<{rank}Q") if rank else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(data):
            raise CorruptionError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(data):
        raise CorruptionError(f"{path}: {len(data) - off} trailing bytes")
    return out


def _sidecar(path) -> Path:
    return Path(str(path) + ".cfg")


def save_checkpoint(model, path) -> None:
    from .config import save_config

    write_tensors(path, ((name, t.data) for name, t in model.parameters()))
    save_config(model.cfg, _sidecar(path))


def load_checkpoint(path):
    from .config import load_config
    from .model import Terraformer

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    if not _sidecar(path).exists():
        raise CorruptionError(f"missing config sidecar {_sidecar(path)}")
    model = Terraformer(load_config(_sidecar(path)))
    stored = read_tensors(path)
    params = dict(model.parameters())
    if set(stored) != set(params):
        missing = sorted(set(params) - set(stored))[:3]
        extra = sorted(set(stored) - set(params))[:3]
        raise CorruptionError(f"checkpoint tensors do not match config (missing {missing}, extra {extra})")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CorruptionError(f"{name}: shape {stored[name].shape} != {p.shape}")
        p.data = stored[name].astype(p.dtype)
    return model
