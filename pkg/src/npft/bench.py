"""Bit-packed low-bit matvec kernels, a sparse outlier side-path, and a generation latency harness.

Codes are packed as a little-endian bit stream in row-major order: code ``k``
occupies stream bits ``[k * bits, (k + 1) * bits)`` and stream bit ``i`` is
bit ``i % 8`` of byte ``i // 8``.  When ``bits`` divides 8 this gives
``8 // bits`` codes per byte; otherwise codes straddle byte boundaries.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

from .model import LanguageModel, sinusoidal_positions
from .quant import OUTLIER_DTYPE, QuantConfig, QuantizedMatrix, quantize_matrix

ARMS = ("full", "uniform", "mixed")
BENCH_COLUMNS = ("arm", "bits", "outlier_ratio", "n_tokens", "repeat", "seconds", "threads", "config_hash")


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack integer codes in [0, 2**bits) into a uint8 bit stream."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    c = np.asarray(codes).ravel()
    if c.size and (c.min() < 0 or c.max() >= (1 << bits)):
        raise ValueError(f"codes out of range for {bits} bits")
    c = c.astype(np.uint8)
    stream = np.unpackbits(c[:, None], axis=1, bitorder="little")[:, :bits].ravel()
    return np.packbits(stream, bitorder="little")


def unpack_codes(data: np.ndarray, bits: int, shape) -> np.ndarray:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    n = int(np.prod(shape))
    stream = np.unpackbits(np.asarray(data, dtype=np.uint8), bitorder="little")
    if stream.size < n * bits:
        raise ValueError("packed buffer too short for the requested shape")
    per = stream[: n * bits].reshape(n, bits)
    weights = (1 << np.arange(bits)).astype(np.uint16)
    return (per.astype(np.uint16) @ weights).astype(np.uint8).reshape(shape)


@dataclass
class PackedMatrix:
    """Packed codes plus per-row dequantization data.

    RTN rows dequantize as ``zero[r] + scale[r] * code``; codebook rows as
    ``codebook[r, code]``.  Per-tensor parameters are broadcast to every row.
    """
    bits: int
    shape: tuple[int, int]
    data: np.ndarray
    scheme: str
    scale: np.ndarray | None = None
    zero: np.ndarray | None = None
    codebook: np.ndarray | None = None

    def __post_init__(self):
        need = math.ceil(self.shape[0] * self.shape[1] * self.bits / 8)
        if self.data.dtype != np.uint8 or self.data.size < need:
            raise ValueError(f"packed data must be >= {need} uint8 bytes")
        if self.scheme == "rtn":
            if self.scale is None or self.zero is None or len(self.scale) != self.shape[0]:
                raise ValueError("rtn packing needs per-row scale and zero")
        elif self.codebook is None or self.codebook.shape != (self.shape[0], 1 << self.bits):
            raise ValueError("codebook packing needs a (rows, 2**bits) codebook")

    @classmethod
    def from_codes(cls, codes: np.ndarray, bits: int, scale=None, zero=None, codebook=None,
                   dtype=np.float32) -> PackedMatrix:
        codes = np.asarray(codes)
        rows = codes.shape[0]
        if codebook is not None:
            cb = np.broadcast_to(np.asarray(codebook, dtype=dtype), (rows, 1 << bits)).copy()
            return cls(bits, codes.shape, pack_codes(codes, bits), "kmeans_nonuniform", codebook=cb)
        s = np.broadcast_to(np.asarray(scale, dtype=dtype).ravel(), (rows,)).copy()
        z = np.broadcast_to(np.asarray(zero, dtype=dtype).ravel(), (rows,)).copy()
        return cls(bits, codes.shape, pack_codes(codes, bits), "rtn", scale=s, zero=z)

    @classmethod
    def from_quantized(cls, q: QuantizedMatrix, dtype=np.float32) -> PackedMatrix:
        if q.scheme == "rtn":
            return cls.from_codes(q.codes, q.bits, scale=q.scale, zero=q.zero_point, dtype=dtype)
        return cls.from_codes(q.codes, q.bits, codebook=q.codebook, dtype=dtype)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.data, self.bits, self.shape)

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        c = self.codes()
        if self.scheme == "rtn":
            return self.zero.astype(dtype)[:, None] + c.astype(dtype) * self.scale.astype(dtype)[:, None]
        return np.take_along_axis(self.codebook.astype(dtype), c.astype(np.int64), axis=1)

    @property
    def nbytes(self) -> int:
        side = sum(a.nbytes for a in (self.scale, self.zero, self.codebook) if a is not None)
        return int(self.data.nbytes + side)


@dataclass
class SparseOutlierMatrix:
    """Coordinate list with strictly increasing (row, col) order."""
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        self.cols = np.ascontiguousarray(self.cols, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise ValueError("rows, cols and values must have equal length")
        if len(self.rows):
            if self.rows.min() < 0 or self.cols.min() < 0 or self.rows.max() >= self.shape[0] \
                    or self.cols.max() >= self.shape[1]:
                raise ValueError("sparse coordinate out of range")
            flat = self.rows * self.shape[1] + self.cols
            if np.any(np.diff(flat) <= 0):
                raise ValueError("sparse coordinates must be strictly increasing in (row, col)")

    @classmethod
    def from_triplets(cls, triplets: np.ndarray, shape, dtype=np.float32) -> SparseOutlierMatrix:
        t = np.asarray(triplets, dtype=OUTLIER_DTYPE)
        return cls(t["row"], t["col"], t["value"].astype(dtype), tuple(shape))

    @classmethod
    def empty(cls, shape, dtype=np.float32) -> SparseOutlierMatrix:
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0, dtype=dtype), tuple(shape))

    def __len__(self) -> int:
        return len(self.rows)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _code_at(data, bitpos, bits, mask):
    byte = bitpos >> 3
    off = bitpos & 7
    v = np.int64(data[byte]) >> off
    if off + bits > 8:
        v |= np.int64(data[byte + 1]) << (8 - off)
    return v & mask


@numba.njit(cache=True, fastmath=True)
def _rtn_matvec4(data, scale, zero, xe, xo, sx, y):
    # xe / xo hold the even / odd entries of x so the inner loop vectorizes
    rows, half = y.shape[0], xe.shape[0]
    for r in range(rows):
        base = r * half
        acc = xe.dtype.type(0.0)
        for j in range(half):
            b = data[base + j]
            acc += xe.dtype.type(b & 15) * xe[j] + xe.dtype.type(b >> 4) * xo[j]
        y[r] = zero[r] * sx + scale[r] * acc


@numba.njit(cache=True)
def _rtn_matvec(data, bits, scale, zero, x, y):
    rows, cols = y.shape[0], x.shape[0]
    mask = (1 << bits) - 1
    sx = x.dtype.type(0.0)
    for c in range(cols):
        sx += x[c]
    for r in range(rows):
        acc = x.dtype.type(0.0)
        pos = r * cols * bits
        for c in range(cols):
            acc += _code_at(data, pos, bits, mask) * x[c]
            pos += bits
        y[r] = zero[r] * sx + scale[r] * acc


@numba.njit(cache=True)
def _codebook_matvec(data, bits, codebook, x, y):
    rows, cols = y.shape[0], x.shape[0]
    mask = (1 << bits) - 1
    for r in range(rows):
        acc = x.dtype.type(0.0)
        pos = r * cols * bits
        for c in range(cols):
            acc += codebook[r, _code_at(data, pos, bits, mask)] * x[c]
            pos += bits
        y[r] = acc


@numba.njit(cache=True)
def _sparse_correct(data, bits, cols, is_rtn, scale, zero, codebook, srows, scols, svals, x, y):
    """Subtract the dense value at each outlier coordinate and add the stored one."""
    mask = (1 << bits) - 1
    for n in range(srows.shape[0]):
        r, c = srows[n], scols[n]
        code = _code_at(data, (r * cols + c) * bits, bits, mask)
        dense = zero[r] + scale[r] * code if is_rtn else codebook[r, code]
        y[r] += (svals[n] - dense) * x[c]


def _check_x(P: PackedMatrix, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != P.shape[1]:
        raise ValueError(f"x has shape {x.shape}, expected ({P.shape[1]},)")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def _dense_pass(P: PackedMatrix, x: np.ndarray) -> np.ndarray:
    y = np.empty(P.shape[0], dtype=x.dtype)
    if P.scheme == "rtn":
        s, z = P.scale.astype(x.dtype, copy=False), P.zero.astype(x.dtype, copy=False)
        if P.bits == 4 and P.shape[1] % 2 == 0:
            xe, xo = np.ascontiguousarray(x[0::2]), np.ascontiguousarray(x[1::2])
            _rtn_matvec4(P.data, s, z, xe, xo, x.dtype.type(x.sum()), y)
        else:
            _rtn_matvec(P.data, P.bits, s, z, x, y)
    else:
        _codebook_matvec(P.data, P.bits, P.codebook.astype(x.dtype, copy=False), x, y)
    return y


def packed_matvec(P: PackedMatrix, x) -> np.ndarray:
    """y = dequantize(P) @ x, accumulated in the dtype of ``x``."""
    return _dense_pass(P, _check_x(P, x))


def mixed_matvec(P: PackedMatrix, S: SparseOutlierMatrix, x) -> np.ndarray:
    """Dense packed pass followed by a subtract-then-add pass over the outliers."""
    if tuple(S.shape) != tuple(P.shape):
        raise ValueError(f"sparse shape {S.shape} does not match packed shape {P.shape}")
    x = _check_x(P, x)
    y = _dense_pass(P, x)
    if len(S):
        dt = x.dtype
        dummy1 = np.zeros(1, dtype=dt)
        dummy2 = np.zeros((1, 1), dtype=dt)
        is_rtn = P.scheme == "rtn"
        _sparse_correct(P.data, P.bits, P.shape[1], is_rtn,
                        P.scale.astype(dt, copy=False) if is_rtn else dummy1,
                        P.zero.astype(dt, copy=False) if is_rtn else dummy1,
                        dummy2 if is_rtn else P.codebook.astype(dt, copy=False),
                        S.rows, S.cols, S.values.astype(dt, copy=False), x, y)
    return y


# ---------------------------------------------------------------------------
# generation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    n_tokens: tuple[int, ...] = (128, 512, 2048)
    repeats: int = 10
    bits: int = 4
    outlier_ratio: float = 0.005
    arms: tuple[str, ...] = ARMS
    threads: int = 1
    warmup_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        for a in self.arms:
            if a not in ARMS:
                raise ValueError(f"unknown arm {a!r}; choose from {ARMS}")
        if self.repeats < 1 or not self.n_tokens or min(self.n_tokens) < 1:
            raise ValueError("repeats and n_tokens must be positive")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _layer_norm(x, g, b, eps=1e-5):
    mu = x.mean()
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean() + eps) * g + b


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def build_linears(model: LanguageModel, arm: str, bits: int = 4, outlier_ratio: float = 0.005,
                  fisher=None) -> dict[str, Callable[[np.ndarray], np.ndarray]]:
    """Matvec callables for every attention/MLP matrix under one arm.

    ``full`` keeps float32 weights; ``uniform`` packs RTN codes; ``mixed``
    also keeps the top ``outlier_ratio`` entries (by Fisher if given, else by
    distance from the row mean) in a sparse side-path.
    """
    from .sensitivity import filter_outliers_matrix

    out = {}
    for wid in model.weight_ids("all"):
        W = np.asarray(model.weight(wid), dtype=np.float64)
        if arm == "full":
            W32 = np.ascontiguousarray(W, dtype=np.float32)
            out[wid.key] = W32.dot
            continue
        cfg = QuantConfig(bits=bits, keep_outliers_fp=arm == "mixed", outlier_ratio=outlier_ratio)
        mask = None
        if arm == "mixed":
            score = fisher[wid.key] if fisher is not None else np.abs(W - W.mean(axis=1, keepdims=True))
            mask = filter_outliers_matrix(np.asarray(score), outlier_ratio)
        q = quantize_matrix(W, cfg, mask=mask)
        P = PackedMatrix.from_quantized(q)
        if arm == "uniform":
            out[wid.key] = lambda x, P=P: packed_matvec(P, x)
        else:
            S = SparseOutlierMatrix.from_triplets(q.sparse_outliers, q.shape)
            out[wid.key] = lambda x, P=P, S=S: mixed_matvec(P, S, x)
    return out


class Generator:
    """Single-sequence greedy decoding with a key/value cache, float32 throughout."""

    def __init__(self, model: LanguageModel, linears: dict[str, Callable]):
        self.cfg = model.cfg
        p = {k: np.asarray(v, dtype=np.float32) for k, v in model.params.items()}
        self.p = p
        self.lin = linears
        self.embed = p["embed"]
        self.lm_head = p["lm_head"]

    def run(self, prompt: Sequence[int], n_tokens: int) -> np.ndarray:
        cfg = self.cfg
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        total = len(prompt) + n_tokens
        pos = sinusoidal_positions(total, cfg.d_model, np.float32)
        K = np.zeros((cfg.n_layers, H, total, dh), dtype=np.float32)
        Vc = np.zeros_like(K)
        inv = np.float32(1.0 / math.sqrt(dh))
        out = np.empty(total, dtype=np.int64)
        out[: len(prompt)] = prompt
        p, lin = self.p, self.lin
        tok = int(prompt[0])
        for t in range(total - 1):
            x = self.embed[tok] + pos[t]
            for layer in range(cfg.n_layers):
                pre = f"L{layer}."
                h = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
                q = lin[pre + "attn_q"](h).reshape(H, dh)
                K[layer, :, t] = lin[pre + "attn_k"](h).reshape(H, dh)
                Vc[layer, :, t] = lin[pre + "attn_v"](h).reshape(H, dh)
                s = np.einsum("hd,htd->ht", q, K[layer, :, : t + 1]) * inv
                s = np.exp(s - s.max(axis=1, keepdims=True))
                s /= s.sum(axis=1, keepdims=True)
                ctx = np.einsum("ht,htd->hd", s, Vc[layer, :, : t + 1]).reshape(-1)
                x = x + lin[pre + "attn_o"](ctx)
                h = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
                x = x + lin[pre + "mlp_out"](_gelu(lin[pre + "mlp_in"](h)))
            if t + 1 < len(prompt):
                tok = int(prompt[t + 1])
                continue
            logits = self.lm_head @ _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
            tok = int(np.argmax(logits))
            out[t + 1] = tok
        return out

    def logits(self, tokens: Sequence[int]) -> np.ndarray:
        """Next-token logits at every position of ``tokens`` (teacher forcing)."""
        cfg = self.cfg
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        T = len(tokens)
        pos = sinusoidal_positions(T, cfg.d_model, np.float32)
        K = np.zeros((cfg.n_layers, H, T, dh), dtype=np.float32)
        Vc = np.zeros_like(K)
        p, lin = self.p, self.lin
        res = np.empty((T, cfg.vocab_size), dtype=np.float32)
        for t in range(T):
            x = self.embed[int(tokens[t])] + pos[t]
            for layer in range(cfg.n_layers):
                pre = f"L{layer}."
                h = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
                q = lin[pre + "attn_q"](h).reshape(H, dh)
                K[layer, :, t] = lin[pre + "attn_k"](h).reshape(H, dh)
                Vc[layer, :, t] = lin[pre + "attn_v"](h).reshape(H, dh)
                s = np.einsum("hd,htd->ht", q, K[layer, :, : t + 1]) / math.sqrt(dh)
                s = np.exp(s - s.max(axis=1, keepdims=True))
                s /= s.sum(axis=1, keepdims=True)
                ctx = np.einsum("ht,htd->hd", s, Vc[layer, :, : t + 1]).reshape(-1)
                x = x + lin[pre + "attn_o"](ctx)
                h = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
                x = x + lin[pre + "mlp_out"](_gelu(lin[pre + "mlp_in"](h)))
            res[t] = self.lm_head @ _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return res


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict[tuple[str, int], dict[str, float]]:
        """(arm, n_tokens) -> median, p10, p90 seconds."""
        groups: dict[tuple[str, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["arm"], r["n_tokens"]), []).append(r["seconds"])
        return {k: {"median": float(np.median(v)), "p10": float(np.percentile(v, 10)),
                    "p90": float(np.percentile(v, 90)), "n": len(v)} for k, v in groups.items()}

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
        return path


def bench_generate(model: LanguageModel, cfg: BenchConfig = BenchConfig(), fisher=None,
                   prompt: Sequence[int] | None = None) -> BenchResult:
    """Wall-clock latency of greedy generation per arm and length.

    Arms are interleaved within each repeat so slow drifts of the machine hit
    every arm alike.
    """
    from threadpoolctl import threadpool_limits

    gens = {a: Generator(model, build_linears(model, a, cfg.bits, cfg.outlier_ratio, fisher)) for a in cfg.arms}
    prompt = list(prompt) if prompt is not None else [int(b) for b in b"The "]
    h = cfg.config_hash()
    res = BenchResult()
    with threadpool_limits(limits=cfg.threads):
        for g in gens.values():
            g.run(prompt, cfg.warmup_tokens)
        for n in cfg.n_tokens:
            for rep in range(cfg.repeats):
                for arm in cfg.arms:
                    t0 = time.perf_counter()
                    gens[arm].run(prompt, n)
                    dt = time.perf_counter() - t0
                    res.rows.append({"arm": arm, "bits": 32 if arm == "full" else cfg.bits,
                                     "outlier_ratio": cfg.outlier_ratio if arm == "mixed" else 0.0,
                                     "n_tokens": n, "repeat": rep, "seconds": dt,
                                     "threads": cfg.threads, "config_hash": h})
    return res


def bench_matvec(d_out: int, d_in: int, bits: int = 4, outlier_ratio: float = 0.005, repeats: int = 50,
                 seed: int = 0) -> dict[str, float]:
    """Median seconds per matvec for synthetic full, packed and mixed matrices of one shape."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d_out, d_in)).astype(np.float32)
    x = rng.standard_normal(d_in).astype(np.float32)
    from .sensitivity import filter_outliers_matrix

    mask = filter_outliers_matrix(np.abs(W), outlier_ratio)
    qu = quantize_matrix(W, QuantConfig(bits=bits))
    qm = quantize_matrix(W, QuantConfig(bits=bits, keep_outliers_fp=True, outlier_ratio=outlier_ratio), mask=mask)
    Pu, Pm = PackedMatrix.from_quantized(qu), PackedMatrix.from_quantized(qm)
    S = SparseOutlierMatrix.from_triplets(qm.sparse_outliers, qm.shape)
    fns = {"full": lambda: W.dot(x), "uniform": lambda: packed_matvec(Pu, x),
           "mixed": lambda: mixed_matvec(Pm, S, x)}
    times = {k: [] for k in fns}
    for f in fns.values():
        f()
    for _ in range(repeats):
        for k, f in fns.items():
            t0 = time.perf_counter()
            f()
            times[k].append(time.perf_counter() - t0)
    return {k: float(np.median(v)) for k, v in times.items()}
