"""Structured zero-mean weight perturbations on outlier channels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import LanguageModel, Overlay, WeightId
from .sensitivity import OutlierMask
from .train import subseed

DISTRIBUTIONS = ("uniform", "gaussian", "laplace")
AXES = ("output_channel", "input_channel")
MAGNITUDES = ("quant_bin", "channel_range")
MASK_MODES = ("outliers_only", "whole_channel")


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str = "uniform"
    axis: str = "output_channel"
    magnitude: str = "quant_bin"
    bits: int = 4
    mask_mode: str = "outliers_only"
    seed: int = 0

    def __post_init__(self):
        for name, allowed in (("distribution", DISTRIBUTIONS), ("axis", AXES),
                              ("magnitude", MAGNITUDES), ("mask_mode", MASK_MODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.magnitude == "quant_bin" and not 2 <= self.bits <= 8:
            raise ValueError("bits must lie in [2, 8]")


@dataclass
class NoiseOverlay:
    values: dict[str, np.ndarray]
    spec: NoiseSpec
    epoch: int = 0
    stats: dict[str, float] = field(default_factory=dict)

    def overlays(self) -> list[Overlay]:
        return [Overlay(WeightId.parse(k), v) for k, v in self.values.items()]


def draw_raw(rng: np.random.Generator, n: int, distribution: str, lo: float, hi: float) -> np.ndarray:
    """``n`` draws with the mean and variance of U[lo, hi] (exactly U[lo, hi] for uniform)."""
    width = hi - lo
    mid = 0.5 * (lo + hi)
    if distribution == "uniform":
        return rng.uniform(lo, hi, size=n)
    if distribution == "gaussian":
        return rng.normal(mid, width / math.sqrt(12.0), size=n)
    if distribution == "laplace":
        return rng.laplace(mid, width / math.sqrt(24.0), size=n)
    raise ValueError(f"unknown distribution {distribution!r}")


def channel_support(W: np.ndarray, spec: NoiseSpec) -> tuple[float, float] | None:
    """Pre-centering interval for one channel, or None for a degenerate channel."""
    lo, hi = float(W.min()), float(W.max())
    if hi == lo:
        return None
    if spec.magnitude == "channel_range":
        return lo, hi
    half = 0.5 * (hi - lo) / ((1 << spec.bits) - 1)
    return -half, half


def sample_noise_matrix(W: np.ndarray, mask: np.ndarray, spec: NoiseSpec,
                        rng: np.random.Generator) -> np.ndarray:
    """Centered noise on every channel of ``W`` that holds at least one mask position."""
    W = np.asarray(W)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != W.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weight {W.shape}")
    Wc, Mc = (W, mask) if spec.axis == "output_channel" else (W.T, mask.T)
    z = np.zeros(Wc.shape, dtype=np.float64)
    for c in np.flatnonzero(Mc.any(axis=1)):
        allowed = Mc[c] if spec.mask_mode == "outliers_only" else np.ones(Wc.shape[1], dtype=bool)
        interval = channel_support(Wc[c], spec)
        if interval is None:
            continue
        noise = draw_raw(rng, int(allowed.sum()), spec.distribution, *interval)
        noise -= noise.mean()
        z[c, allowed] = noise
    return (z if spec.axis == "output_channel" else z.T).astype(W.dtype)


def sample_noise(weights: LanguageModel | dict[str, np.ndarray], mask: OutlierMask, spec: NoiseSpec,
                 epoch: int = 0) -> NoiseOverlay:
    """One overlay per masked matrix, each drawn from its own named sub-seed."""
    params = weights.params if isinstance(weights, LanguageModel) else weights
    values, n_nonzero, sq = {}, 0, 0.0
    for key in mask.keys():
        W = params[key]
        rng = np.random.default_rng(subseed(spec.seed, f"noise:{key}:{epoch}"))
        z = sample_noise_matrix(W, mask.dense(key), spec, rng)
        values[key] = z
        nz = z[z != 0]
        n_nonzero += nz.size
        sq += float(np.sum(nz.astype(np.float64) ** 2))
    stats = {"n_nonzero": float(n_nonzero), "rms": math.sqrt(sq / n_nonzero) if n_nonzero else 0.0}
    return NoiseOverlay(values, spec, epoch, stats)


def apply_noise(model: LanguageModel, overlay: NoiseOverlay) -> list[Overlay]:
    """Install the overlay non-destructively; pass the result to ``model.remove`` to undo."""
    for key in overlay.values:
        if key not in model.params:
            raise KeyError(f"model has no matrix {key}")
    return model.install(overlay.overlays())
