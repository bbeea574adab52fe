"""Binary checkpoint container for models, optimizer state and quantized matrices.

Layout (all integers little-endian):

    b"NPFT"  u32 version  u32 meta_len  meta (UTF-8 JSON)
    u32 n_tensors
    n_tensors x [u16 name_len  name  u8 dtype  u8 ndim  u32 shape[ndim]  u64 offset  u64 nbytes]
    raw data, each tensor starting at an 8-byte aligned absolute offset

Names are namespaced: ``param/<name>`` for model parameters, ``opt/<key>``
for Adam state, ``q/<matrix>/<part>`` for quantized sections where part is
``codes`` (packed bit stream), ``scale``, ``zero``, ``codebook`` or
``outliers`` (row u32, col u32, value f32 triplets).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import pack_codes, unpack_codes
from .model import LanguageModel, ModelConfig, config_dict
from .quant import OUTLIER_DTYPE, QuantConfig, QuantizedMatrix

MAGIC = b"NPFT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<u4"),
           4: np.dtype("<i8"), 5: OUTLIER_DTYPE, 6: np.dtype("<i4")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + 7) & ~7


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    arrays = []
    for name, arr in tensors.items():
        a = np.asarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for tensor {name!r}")
        arrays.append((name.encode(), _CODES[dt], np.ascontiguousarray(a, dtype=dt)))
    table_len = 4 + sum(2 + len(n) + 2 + 4 * a.ndim + 16 for n, _, a in arrays)
    offset = _align(12 + len(meta_b) + table_len)
    header = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    placed = []
    for name, code, a in arrays:
        header.append(struct.pack("<H", len(name)) + name + struct.pack("<BB", code, a.ndim))
        header.append(struct.pack(f"<{a.ndim}I", *a.shape))
        header.append(struct.pack("<QQ", offset, a.nbytes))
        placed.append((offset, a))
        offset = _align(offset + a.nbytes)
    with path.open("wb") as f:
        f.write(b"".join(header))
        for off, a in placed:
            f.write(b"\0" * (off - f.tell()))
            f.write(a.tobytes())
    return path


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    meta = json.loads(buf[pos:pos + meta_len].decode())
    pos += meta_len
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nl].decode()
        pos += 2 + nl
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        dt = _DTYPES[code]
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
    return out, meta


@dataclass
class Checkpoint:
    model: LanguageModel
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    quantized: dict[str, QuantizedMatrix] = field(default_factory=dict)


def save_checkpoint(path, model: LanguageModel, meta: dict | None = None, optimizer: dict | None = None,
                    quantized: dict[str, QuantizedMatrix] | None = None) -> Path:
    tensors: dict[str, np.ndarray] = {f"param/{k}": v for k, v in model.params.items()}
    for k, v in (optimizer or {}).items():
        tensors[f"opt/{k}"] = v
    qmeta = {}
    for key, q in (quantized or {}).items():
        p = f"q/{key}/"
        tensors[p + "codes"] = pack_codes(q.codes, q.bits)
        if q.scheme == "rtn":
            tensors[p + "scale"] = np.asarray(q.scale, dtype=np.float64)
            tensors[p + "zero"] = np.asarray(q.zero_point, dtype=np.float64)
        else:
            tensors[p + "codebook"] = np.asarray(q.codebook, dtype=np.float64)
        tensors[p + "outliers"] = q.sparse_outliers
        qmeta[key] = {"bits": q.bits, "scheme": q.scheme, "granularity": q.granularity, "shape": list(q.shape)}
    full_meta = dict(meta or {})
    full_meta["model_config"] = config_dict(model.cfg)
    full_meta["dtype"] = np.dtype(model.dtype).name
    if qmeta:
        full_meta["quantized"] = qmeta
    return write_tensors(path, tensors, full_meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: missing model_config")
    cfg = ModelConfig(**meta["model_config"])
    dtype = np.dtype(meta.get("dtype", "float64"))
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    model = LanguageModel(cfg, params, dtype)
    opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    quantized = {}
    for key, info in meta.get("quantized", {}).items():
        p = f"q/{key}/"
        shape = tuple(info["shape"])
        codes = unpack_codes(tensors[p + "codes"], info["bits"], shape)
        quantized[key] = QuantizedMatrix(
            codes, info["bits"], info["scheme"], info["granularity"], shape,
            scale=tensors.get(p + "scale"), zero_point=tensors.get(p + "zero"),
            codebook=tensors.get(p + "codebook"), sparse_outliers=tensors[p + "outliers"])
    return Checkpoint(model, meta, opt, quantized)


def quant_config_from_meta(meta: dict) -> QuantConfig | None:
    q = meta.get("quant_config")
    return QuantConfig(**q) if q else None
