"""Binary checkpoint format.

Layout, all little-endian::

    b"DSPK"  u32 version
    u32 input_dim  u32 context  u32 stride  u32 hidden[5]
    f64 dropout_rate  u32 n_dropout_layers  u32 dropout_layers[n]
    u32 dtype_code (0 = float64, 1 = float32)  u32 output_dim
    then for each tensor in PARAM_NAMES order:
        u32 rank  u32 dims[rank]  f64 data[prod(dims)]  (row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from dspeech.network import DTYPES, PARAM_NAMES, NetworkConfig, NetworkParams

MAGIC = b"DSPK"
VERSION = 1
_DTYPE_CODES = {"float64": 0, "float32": 1}


def dumps(params: NetworkParams) -> bytes:
    cfg = params.config
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<3I", cfg.input_dim, cfg.context, cfg.stride))
    out.write(struct.pack("<5I", *cfg.hidden))
    out.write(struct.pack("<dI", cfg.dropout_rate, len(cfg.dropout_layers)))
    out.write(struct.pack(f"<{len(cfg.dropout_layers)}I", *cfg.dropout_layers))
    out.write(struct.pack("<2I", _DTYPE_CODES[cfg.dtype], cfg.output_dim))
    for name in PARAM_NAMES:
        arr = np.asarray(params.tensors[name])
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> NetworkParams:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ValueError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    input_dim, context, stride = r.unpack("<3I")
    hidden = r.unpack("<5I")
    dropout_rate, n_layers = r.unpack("<dI")
    dropout_layers = r.unpack(f"<{n_layers}I")
    dtype_code, output_dim = r.unpack("<2I")
    dtype = {v: k for k, v in _DTYPE_CODES.items()}[dtype_code]
    cfg = NetworkConfig(input_dim, context, stride, hidden, dropout_rate, dropout_layers, dtype, output_dim)
    cfg.validate()
    expected = cfg.shapes()
    tensors = {}
    for name in PARAM_NAMES:
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        if shape != expected[name]:
            raise ValueError(f"tensor {name} has shape {shape}, config implies {expected[name]}")
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(DTYPES[dtype])
    if r.pos != len(data):
        raise ValueError("trailing bytes after checkpoint")
    return NetworkParams(cfg, tensors)


def save(params: NetworkParams, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(params))


def load(path) -> NetworkParams:
    return loads(Path(path).read_bytes())
