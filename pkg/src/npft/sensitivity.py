"""Weight sensitivity: Fisher diagonal, outlier masks, exact loss deltas and trace estimators."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CalibrationSet
from .model import LanguageModel, LoraAdapter, Overlay, WeightId
from .quant import QuantConfig, rtn_bin_width, rtn_quantize


@dataclass
class FisherDiag:
    values: dict[str, np.ndarray]
    n_batches: int
    grad_norm: float = float("nan")  # norm of the mean calibration gradient

    def __getitem__(self, wid: WeightId | str) -> np.ndarray:
        return self.values[wid if isinstance(wid, str) else wid.key]

    def __contains__(self, wid) -> bool:
        return (wid if isinstance(wid, str) else wid.key) in self.values

    def keys(self):
        return self.values.keys()

    def mass(self, mask: OutlierMask) -> float:
        """Sum of F over the mask's positions."""
        total = 0.0
        for key, pos in mask.positions.items():
            if len(pos):
                total += float(self.values[key][pos[:, 0], pos[:, 1]].sum())
        return total


@dataclass
class OutlierMask:
    positions: dict[str, np.ndarray]   # key -> (k, 2) int array of (row, col), sorted row-major
    shapes: dict[str, tuple[int, int]]
    ratio: float

    def dense(self, wid: WeightId | str) -> np.ndarray:
        key = wid if isinstance(wid, str) else wid.key
        m = np.zeros(self.shapes[key], dtype=bool)
        pos = self.positions[key]
        if len(pos):
            m[pos[:, 0], pos[:, 1]] = True
        return m

    @property
    def size(self) -> int:
        return sum(len(p) for p in self.positions.values())

    def keys(self):
        return self.positions.keys()


@dataclass
class TraceEstimate:
    value: float
    n_samples: int
    std_error: float
    mean_increase: float | None = None
    noise_var: float | None = None


def _detached(adapters: Sequence[LoraAdapter]) -> list[LoraAdapter]:
    return [LoraAdapter(a.target, a.rank, a.alpha, Tensor(a.U.data), Tensor(a.V.data)) for a in adapters]


def fisher_diag(model: LanguageModel, calib: CalibrationSet, weight_ids: Iterable[WeightId] | None = None,
                adapters: Sequence[LoraAdapter] = (), batch_size: int = 1) -> FisherDiag:
    """Mean over calibration batches of the squared batch gradient of every entry.

    Gradients are taken w.r.t. the stored weights with adapters and installed
    overlays in effect; neither the model nor the adapters are modified.
    """
    if len(calib) == 0:
        raise ValueError("empty calibration set")
    ids = list(model.weight_ids("every") if weight_ids is None else weight_ids)
    keys = [w.key for w in ids]
    acc = {k: np.zeros(model.params[k].shape) for k in keys}
    gsum = {k: np.zeros(model.params[k].shape) for k in keys}
    frozen = _detached(adapters)
    n = 0
    for batch in calib.batches(batch_size):
        loss, leaves = model.forward(batch, adapters=frozen, trainable=keys)
        ad.backward(loss)
        for k in keys:
            g = leaves[k].grad.astype(np.float64)
            acc[k] += g * g
            gsum[k] += g
        n += 1
    gnorm = math.sqrt(sum(float(np.sum((v / n) ** 2)) for v in gsum.values()))
    return FisherDiag({k: v / n for k, v in acc.items()}, n, gnorm)


def outlier_count(gamma: float, size: int) -> int:
    """round(gamma * size), halves rounded up."""
    return int(math.floor(gamma * size + 0.5 + 1e-9))


def filter_outliers_matrix(F: np.ndarray, gamma: float) -> np.ndarray:
    """Boolean mask of the top-gamma entries of F; ties go to the lower (row, col)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    F = np.asarray(F)
    k = outlier_count(gamma, F.size)
    mask = np.zeros(F.shape, dtype=bool)
    if k:
        order = np.argsort(-F.ravel(), kind="stable")[:k]
        mask.ravel()[order] = True
    return mask


def filter_outliers(F: FisherDiag, gamma: float, weight_ids: Iterable[WeightId] | None = None) -> OutlierMask:
    keys = list(F.keys()) if weight_ids is None else [w.key for w in weight_ids]
    positions, shapes = {}, {}
    for k in keys:
        m = filter_outliers_matrix(F.values[k], gamma)
        positions[k] = np.argwhere(m)
        shapes[k] = m.shape
    return OutlierMask(positions, shapes, gamma)


# ---------------------------------------------------------------------------
# exact sensitivity
# ---------------------------------------------------------------------------

def calib_loss(model: LanguageModel, calib: CalibrationSet, overlays: Sequence[Overlay] = (),
               adapters: Sequence[LoraAdapter] = (), batch_size: int = 32) -> float:
    total, count = 0.0, 0
    for batch in calib.batches(batch_size):
        loss, _ = model.forward(batch, overlays, adapters)
        total += float(loss.data) * len(batch)
        count += len(batch)
    return total / count


def exact_sensitivities(model: LanguageModel, calib: CalibrationSet, wid: WeightId, positions,
                        quant_cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    """Loss increase from quantizing one entry at a time: L(W with w_ij -> q(w_ij)) - L(W)."""
    W = model.weight(wid)
    positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
    if positions.size and (positions.min() < 0 or np.any(positions.max(axis=0) >= W.shape)):
        raise IndexError(f"position out of range for {wid} with shape {W.shape}")
    Wq = rtn_quantize(W, quant_cfg).dequantize(np.float64)
    base = calib_loss(model, calib)
    out = np.empty(len(positions))
    for n, (i, j) in enumerate(positions):
        delta = Wq[i, j] - float(W[i, j])
        if delta == 0.0:
            out[n] = 0.0
            continue
        z = np.zeros(W.shape, dtype=model.dtype)
        z[i, j] = delta
        out[n] = calib_loss(model, calib, [Overlay(wid, z)]) - base
    return out


def exact_sensitivity(model, calib, wid: WeightId, position, quant_cfg: QuantConfig = QuantConfig()) -> float:
    return float(exact_sensitivities(model, calib, wid, [position], quant_cfg)[0])


# ---------------------------------------------------------------------------
# trace estimators
# ---------------------------------------------------------------------------

def _summarize(samples: np.ndarray) -> tuple[float, float]:
    n = len(samples)
    se = float(np.std(samples, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return float(np.mean(samples)), se


def hutchinson_trace(matvec: Callable[[np.ndarray], np.ndarray], dim: int, n_samples: int,
                     dist: str = "rademacher", seed: int = 0) -> TraceEstimate:
    """Monte-Carlo trace from quadratic forms z^T H z with zero-mean, identity-covariance probes."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if dist == "rademacher":
        Z = rng.integers(0, 2, size=(n_samples, dim)) * 2.0 - 1.0
    elif dist == "unit_gaussian":
        Z = rng.standard_normal((n_samples, dim))
    else:
        raise ValueError(f"unknown probe distribution {dist!r}")
    q = np.empty(n_samples)
    for s in range(n_samples):
        hz = np.asarray(matvec(Z[s]))
        if hz.shape != (dim,):
            raise ValueError(f"matvec returned shape {hz.shape}, expected ({dim},)")
        q[s] = Z[s] @ hz
    value, se = _summarize(q)
    return TraceEstimate(value, n_samples, se)


def perturbation_trace_fn(loss_fn: Callable[[np.ndarray], float], w0: np.ndarray, delta, n_samples: int,
                          seed: int = 0, support: np.ndarray | None = None) -> TraceEstimate:
    """Trace estimate from loss increases under z ~ U[-delta/2, delta/2] on ``support``.

    With Cov(z) = delta^2/12 I the expected increase at a stationary point is
    delta^2/24 * Tr(H), so each sample is rescaled by 24 / delta^2.  When
    ``delta`` varies per entry, the mean of delta^2 over the support is used
    and the result is a delta^2-weighted trace.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    w0 = np.asarray(w0, dtype=np.float64)
    support = np.ones(w0.shape, dtype=bool) if support is None else np.asarray(support, dtype=bool)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), w0.shape)
    if np.any(delta[support] <= 0):
        raise ValueError("delta must be positive")
    d_eff2 = float(np.mean(delta[support] ** 2)) if support.any() else 1.0
    rng = np.random.default_rng(seed)
    base = float(loss_fn(w0))
    inc = np.empty(n_samples)
    s1 = s2 = 0.0
    m = int(support.sum())
    for s in range(n_samples):
        z = np.zeros_like(w0)
        u = rng.uniform(-0.5, 0.5, size=m) * delta[support]
        z[support] = u
        s1 += u.sum()
        s2 += (u * u).sum()
        inc[s] = float(loss_fn(w0 + z)) - base
    rescaled = inc * (24.0 / d_eff2)
    value, se = _summarize(rescaled)
    total = n_samples * m
    noise_var = (s2 / total - (s1 / total) ** 2) if total else 0.0
    return TraceEstimate(value, n_samples, se, float(inc.mean()), noise_var)


def perturbation_trace(model: LanguageModel, calib: CalibrationSet, mask: OutlierMask | None = None,
                       delta: float | None = None, n_samples: int = 16, seed: int = 0, bits: int = 4,
                       weight_ids: Iterable[WeightId] | None = None,
                       adapters: Sequence[LoraAdapter] = ()) -> TraceEstimate:
    """Perturbation trace over the model's attention/MLP matrices (or the mask's).

    ``delta`` defaults to each output channel's RTN bin width at ``bits``.
    """
    ids = list(weight_ids) if weight_ids is not None else (
        [WeightId.parse(k) for k in mask.keys()] if mask is not None else model.weight_ids("all"))
    keys = [w.key for w in ids]
    shapes = [model.params[k].shape for k in keys]
    sizes = [int(np.prod(s)) for s in shapes]
    w0 = np.concatenate([model.params[k].ravel().astype(np.float64) for k in keys])
    support = np.concatenate([(mask.dense(k) if mask is not None else np.ones(s, dtype=bool)).ravel()
                              for k, s in zip(keys, shapes)])
    if delta is None:
        d = np.concatenate([np.repeat(rtn_bin_width(model.params[k], bits), s[1]) for k, s in zip(keys, shapes)])
    else:
        d = np.full(w0.shape, float(delta))
    offsets = np.cumsum([0] + sizes)

    def loss_fn(w: np.ndarray) -> float:
        dz = w - w0
        ovs = [Overlay(wid, dz[offsets[i]:offsets[i + 1]].reshape(shapes[i]).astype(model.dtype))
               for i, wid in enumerate(ids) if np.any(dz[offsets[i]:offsets[i + 1]])]
        return calib_loss(model, calib, ovs, adapters)

    return perturbation_trace_fn(loss_fn, w0, d, n_samples, seed, support)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("weight_id", "row", "col", "fisher", "rank")


@dataclass
class SensitivityReport:
    weight_id: str
    rows: np.ndarray
    cols: np.ndarray
    fisher: np.ndarray
    rank: np.ndarray  # 1 = most sensitive entry of the whole matrix

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_COLUMNS)
            for r, c, v, k in zip(self.rows, self.cols, self.fisher, self.rank):
                w.writerow([self.weight_id, int(r), int(c), repr(float(v)), int(k)])
        return path

    @classmethod
    def from_csv(cls, path) -> SensitivityReport:
        with Path(path).open(newline="") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
                raise ValueError(f"unexpected report columns {reader.fieldnames}")
            rows = list(reader)
        if not rows:
            raise ValueError("empty report")
        return cls(rows[0]["weight_id"],
                   np.array([int(r["row"]) for r in rows]), np.array([int(r["col"]) for r in rows]),
                   np.array([float(r["fisher"]) for r in rows]), np.array([int(r["rank"]) for r in rows]))


def sensitivity_report(F: FisherDiag, wid: WeightId | str, channel: int, axis: str = "input") -> SensitivityReport:
    """One input channel (column) unfolded along output channels, or one output row."""
    key = wid if isinstance(wid, str) else wid.key
    M = F.values[key]
    n_out, n_in = M.shape
    order = np.argsort(-M.ravel(), kind="stable")
    ranks = np.empty(M.size, dtype=np.int64)
    ranks[order] = np.arange(1, M.size + 1)
    ranks = ranks.reshape(M.shape)
    if axis == "input":
        if not 0 <= channel < n_in:
            raise IndexError(f"input channel {channel} out of range [0, {n_in})")
        rows, cols = np.arange(n_out), np.full(n_out, channel)
    elif axis == "output":
        if not 0 <= channel < n_out:
            raise IndexError(f"output channel {channel} out of range [0, {n_out})")
        rows, cols = np.full(n_in, channel), np.arange(n_in)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return SensitivityReport(key, rows, cols, M[rows, cols].copy(), ranks[rows, cols])
