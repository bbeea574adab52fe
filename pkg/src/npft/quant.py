"""Post-training weight quantizers: asymmetric RTN and Fisher-weighted k-means.

Groups are output channels (rows of a (d_out, d_in) matrix) or the whole
tensor.  Optional full-precision outliers are pulled out before quantization
and kept as a sparse (row, col, value) list.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import LanguageModel

SCALE_BITS = 32       # per-group scale and zero point, stored as f32
CODEBOOK_ENTRY_BITS = 32
SPARSE_ENTRY_BITS = 96  # row u32 + col u32 + value f32

OUTLIER_DTYPE = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f4")])


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    scheme: str = "rtn"
    granularity: str = "per_output_channel"
    keep_outliers_fp: bool = False
    outlier_ratio: float = 0.0

    def __post_init__(self):
        if not (isinstance(self.bits, (int, np.integer)) and 2 <= self.bits <= 8):
            raise ValueError(f"bits must be an int in [2, 8], got {self.bits!r}")
        if self.scheme not in ("rtn", "kmeans_nonuniform"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in ("per_output_channel", "per_tensor"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not 0.0 <= self.outlier_ratio <= 1.0:
            raise ValueError("outlier_ratio must lie in [0, 1]")

    @property
    def label(self) -> str:
        s = f"{self.scheme}-w{self.bits}"
        if self.granularity == "per_tensor":
            s += "-tensor"
        if self.keep_outliers_fp:
            s += f"-ol{self.outlier_ratio:g}"
        return s


@dataclass
class QuantizedMatrix:
    codes: np.ndarray             # uint8, same shape as the source matrix
    bits: int
    scheme: str
    granularity: str
    shape: tuple[int, int]
    scale: np.ndarray | None = None        # (groups,)
    zero_point: np.ndarray | None = None   # (groups,)
    codebook: np.ndarray | None = None     # (groups, 2**bits)
    sparse_outliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=OUTLIER_DTYPE))

    def __post_init__(self):
        if self.codes.shape != tuple(self.shape):
            raise ValueError("codes shape mismatch")
        if self.codes.size and int(self.codes.max()) >= (1 << self.bits):
            raise ValueError("code out of range")
        sp = self.sparse_outliers
        if len(sp):
            r, c = sp["row"].astype(np.int64), sp["col"].astype(np.int64)
            if r.max() >= self.shape[0] or c.max() >= self.shape[1]:
                raise ValueError("sparse outlier out of range")
            if len(np.unique(r * self.shape[1] + c)) != len(sp):
                raise ValueError("sparse outlier positions must be disjoint")

    @property
    def n_groups(self) -> int:
        return self.shape[0] if self.granularity == "per_output_channel" else 1

    def dense_dequantize(self, dtype=np.float64) -> np.ndarray:
        """Dequantized matrix without the sparse overlay."""
        if self.scheme == "rtn":
            s = self.scale.astype(dtype)[:, None]
            z = self.zero_point.astype(dtype)[:, None]
            return (z + self.codes.astype(dtype) * s) if self.n_groups > 1 else \
                (z[0, 0] + self.codes.astype(dtype) * s[0, 0])
        cb = self.codebook.astype(dtype)
        if self.n_groups > 1:
            return np.take_along_axis(cb, self.codes.astype(np.int64), axis=1)
        return cb[0][self.codes.astype(np.int64)]

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        out = self.dense_dequantize(dtype)
        sp = self.sparse_outliers
        if len(sp):
            out[sp["row"].astype(np.int64), sp["col"].astype(np.int64)] = sp["value"].astype(dtype)
        return out

    def overhead_bits(self) -> int:
        if self.scheme == "rtn":
            side = 2 * SCALE_BITS * self.n_groups
        else:
            side = CODEBOOK_ENTRY_BITS * (1 << self.bits) * self.n_groups
        return side + SPARSE_ENTRY_BITS * len(self.sparse_outliers)


@dataclass
class BitsReport:
    per_matrix: dict[str, float]
    n_weights: int
    code_bits: int
    overhead_bits: int

    @property
    def effective_bits(self) -> float:
        return (self.code_bits + self.overhead_bits) / self.n_weights

    def to_dict(self) -> dict:
        return {"effective_bits": self.effective_bits, "n_weights": self.n_weights,
                "code_bits": self.code_bits, "overhead_bits": self.overhead_bits,
                "per_matrix": dict(self.per_matrix)}


def effective_bits(bits: int, n: int, overhead_bits: int) -> float:
    """(code bits * n + overhead) / n."""
    return (bits * n + overhead_bits) / n


def _groups(W: np.ndarray, granularity: str) -> np.ndarray:
    return W if granularity == "per_output_channel" else W.reshape(1, -1)


def rtn_quantize(W: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """Asymmetric min/max grid per group, round-half-to-even codes."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("rtn_quantize expects a 2-D matrix")
    if not np.all(np.isfinite(W)):
        raise ValueError("cannot quantize non-finite weights")
    G = _groups(W, cfg.granularity)
    lo = G.min(axis=1)
    hi = G.max(axis=1)
    levels = (1 << cfg.bits) - 1
    degenerate = hi == lo
    scale = np.where(degenerate, 1.0, (hi - lo) / levels)
    codes = np.rint((G - lo[:, None]) / scale[:, None])
    codes = np.clip(codes, 0, levels)
    codes[degenerate] = 0
    return QuantizedMatrix(codes.reshape(W.shape).astype(np.uint8), cfg.bits, "rtn", cfg.granularity,
                           W.shape, scale=scale, zero_point=lo)


def rtn_bin_width(W: np.ndarray, bits: int, axis: str = "output_channel") -> np.ndarray:
    """Per-channel RTN step (max - min) / (2**bits - 1) along rows or columns."""
    W = np.asarray(W)
    ax = 1 if axis == "output_channel" else 0
    return (W.max(axis=ax) - W.min(axis=ax)) / ((1 << bits) - 1)


# ---------------------------------------------------------------------------
# weighted k-means
# ---------------------------------------------------------------------------

def _weighted_quantiles(x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs, ws = x[order], w[order]
    cdf = np.cumsum(ws)
    cdf = cdf / cdf[-1]
    targets = (np.arange(k) + 0.5) / k
    idx = np.minimum(np.searchsorted(cdf, targets, side="left"), len(xs) - 1)
    return xs[idx]


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid index; ties go to the lower centroid value."""
    order = np.argsort(centroids, kind="stable")
    c = centroids[order]
    mids = (c[1:] + c[:-1]) / 2
    pos = np.searchsorted(mids, x, side="left")
    return order[pos]


def _objective(x, w, centroids, assign) -> float:
    d = x - centroids[assign]
    return float(np.sum(w * d * d))


def weighted_lloyd(x: np.ndarray, w: np.ndarray, init: np.ndarray, max_iter: int = 100,
                   tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Weighted Lloyd iterations from ``init``.

    Returns (centroids, assignment, objective history).  Each iteration is an
    assignment step followed by a centroid update; empty or weightless
    clusters are re-seeded on the point with the largest weighted error,
    which leaves the objective unchanged, so the history is non-increasing.
    """
    c = init.astype(np.float64).copy()
    a = _assign(x, c)
    history = [_objective(x, w, c, a)]
    for _ in range(max_iter):
        k = len(c)
        new_c = c.copy()
        wsum = np.bincount(a, weights=w, minlength=k)
        xsum = np.bincount(a, weights=w * x, minlength=k)
        live = wsum > 0
        new_c[live] = xsum[live] / wsum[live]
        dead = np.flatnonzero(~live)
        if len(dead):
            err = w * (x - new_c[a]) ** 2
            for j in dead:
                if np.any(a == j):
                    continue  # only zero-weight points: centroid value is irrelevant
                i = int(np.argmax(err))
                if err[i] <= 0:
                    break
                new_c[j] = x[i]
                err[i] = 0.0
        new_a = _assign(x, new_c)
        obj = _objective(x, w, new_c, new_a)
        prev = history[-1]
        if obj > prev:
            break  # round-off at a fixed point; keep the previous state
        c, a = new_c, new_a
        history.append(obj)
        if prev - obj <= tol * max(prev, 1e-300):
            break
    return c, a, history


def kmeans_codebook(x: np.ndarray, w: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Codebook of ``k`` centroids minimizing sum w * (x - c(x))^2 for one group."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w > 0):
        w = np.ones_like(x)
    distinct = np.unique(x)
    if len(distinct) <= k:
        cb = np.concatenate([distinct, np.full(k - len(distinct), distinct[-1])])
        a = _assign(x, cb)
        return cb, a, [_objective(x, w, cb, a)]
    best = None
    lo, hi = x.min(), x.max()
    for init in (_weighted_quantiles(x, w, k), lo + (hi - lo) * np.arange(k) / (k - 1)):
        run = weighted_lloyd(x, w, init)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    c, a, hist = best
    return c, a, hist


def kmeans_quantize(W: np.ndarray, F: np.ndarray, cfg: QuantConfig) -> QuantizedMatrix:
    """Per-group sensitivity-weighted non-uniform codebooks."""
    W = np.asarray(W, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if F.shape != W.shape:
        raise ValueError(f"sensitivity shape {F.shape} does not match weight {W.shape}")
    k = 1 << cfg.bits
    G, FG = _groups(W, cfg.granularity), _groups(F, cfg.granularity)
    codes = np.empty(G.shape, dtype=np.uint8)
    books = np.empty((G.shape[0], k))
    for g in range(G.shape[0]):
        cb, a, _ = kmeans_codebook(G[g], FG[g], k)
        books[g] = cb
        codes[g] = a
    return QuantizedMatrix(codes.reshape(W.shape), cfg.bits, "kmeans_nonuniform", cfg.granularity,
                           W.shape, codebook=books)


# ---------------------------------------------------------------------------
# outliers and whole-model quantization
# ---------------------------------------------------------------------------

def extract_outliers(W: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Replace masked entries with their row's mean over unmasked entries.

    Returns (dense, sparse) where ``sparse`` is a row-major sorted array of
    (row, col, value) holding the original values at masked positions.
    Rows that are fully masked use the plain row mean.
    """
    W = np.asarray(W)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != W.shape:
        raise ValueError("mask shape does not match weight")
    dense = W.copy()
    keep = ~mask
    counts = keep.sum(axis=1)
    sums = np.where(keep, W, 0).sum(axis=1)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), W.mean(axis=1))
    rows, cols = np.nonzero(mask)
    dense[rows, cols] = means[rows].astype(W.dtype)
    sparse = np.zeros(len(rows), dtype=OUTLIER_DTYPE)
    sparse["row"], sparse["col"], sparse["value"] = rows, cols, W[rows, cols]
    return dense, sparse


def scatter_outliers(dense: np.ndarray, sparse: np.ndarray, values=None) -> np.ndarray:
    out = dense.copy()
    vals = sparse["value"] if values is None else values
    out[sparse["row"].astype(np.int64), sparse["col"].astype(np.int64)] = vals
    return out


def quantize_matrix(W: np.ndarray, cfg: QuantConfig, F: np.ndarray | None = None,
                    mask: np.ndarray | None = None) -> QuantizedMatrix:
    sparse = np.zeros(0, dtype=OUTLIER_DTYPE)
    if cfg.keep_outliers_fp and mask is not None and mask.any():
        W, sparse = extract_outliers(W, mask)
    if cfg.scheme == "rtn":
        q = rtn_quantize(W, cfg)
    else:
        if F is None:
            raise ValueError("kmeans_nonuniform needs a sensitivity matrix")
        q = kmeans_quantize(W, F, cfg)
    q.sparse_outliers = sparse
    return q


@dataclass
class QuantizedModel:
    model: LanguageModel                  # forward-ready view with dequantized weights
    matrices: dict[str, QuantizedMatrix]
    report: BitsReport
    cfg: QuantConfig


def quantize_model(model: LanguageModel, cfg: QuantConfig, fisher=None, subset: str = "all") -> QuantizedModel:
    """Quantize attention/MLP matrices; embeddings and LM head stay full precision.

    ``fisher`` is a :class:`~npft.sensitivity.FisherDiag` (or a mapping of
    weight key to array) and is required for k-means or outlier retention.
    """
    from .sensitivity import filter_outliers_matrix

    needs_f = cfg.scheme == "kmeans_nonuniform" or (cfg.keep_outliers_fp and cfg.outlier_ratio > 0)
    fmap = getattr(fisher, "values", fisher)
    if needs_f and fmap is None:
        raise ValueError(f"{cfg.label} needs Fisher sensitivities")
    out = model.copy()
    matrices: dict[str, QuantizedMatrix] = {}
    per_matrix: dict[str, float] = {}
    n = code = over = 0
    for wid in model.weight_ids(subset):
        W = model.weight(wid)
        F = None if fmap is None else np.asarray(fmap[wid.key] if wid.key in fmap else fmap[wid])
        mask = None
        if cfg.keep_outliers_fp and cfg.outlier_ratio > 0:
            mask = filter_outliers_matrix(F, cfg.outlier_ratio)
        q = quantize_matrix(W, cfg, F, mask)
        matrices[wid.key] = q
        out.params[wid.key] = q.dequantize(model.dtype)
        size = W.size
        per_matrix[wid.key] = effective_bits(cfg.bits, size, q.overhead_bits())
        n += size
        code += cfg.bits * size
        over += q.overhead_bits()
    return QuantizedModel(out, matrices, BitsReport(per_matrix, n, code, over), cfg)
