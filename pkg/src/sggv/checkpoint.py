"""Binary model checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"SGGV"
    version u16      currently 1
    arch    u32 byte length + UTF-8 canonical architecture string
    K       u64
    params  K f64
    m       K f64
    v       K f64
    t       u64

Moment buffers are stored so training can resume exactly.  float32 models
are written as f64 (lossless) and come back as f64; cast with
:func:`sggv.nn.with_dtype` if needed.
"""

import struct

import numpy as np

from .errors import DataLoadError
from .nn import ModelState, format_arch, param_count, parse_arch

MAGIC = b"SGGV"
VERSION = 1


def save_checkpoint(state, path):
    arch_bytes = format_arch(state.arch).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(arch_bytes)))
        fh.write(arch_bytes)
        fh.write(struct.pack("<Q", state.k))
        fh.write(state.params.astype("<f8").tobytes())
        fh.write(state.m.astype("<f8").tobytes())
        fh.write(state.v.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", state.t))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[:4] != MAGIC:
            raise DataLoadError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise DataLoadError(f"{path}: unsupported version {version}")
        (arch_len,) = struct.unpack_from("<I", data, 6)
        off = 10
        arch = parse_arch(data[off:off + arch_len].decode("utf-8"))
        off += arch_len
        (k,) = struct.unpack_from("<Q", data, off)
        off += 8
        if k != param_count(arch):
            raise DataLoadError(
                f"{path}: K={k} does not match the architecture "
                f"({param_count(arch)} parameters)")
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(data, dtype="<f8", count=k, offset=off).copy())
            off += 8 * k
        (t,) = struct.unpack_from("<Q", data, off)
        off += 8
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        raise DataLoadError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(data):
        raise DataLoadError(f"{path}: {len(data) - off} trailing bytes")
    params, m, v = arrays
    return ModelState(arch, params, m, v, int(t))
