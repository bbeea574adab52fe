"""Noise-perturbed LoRA fine-tuning of a frozen base model.

Each epoch refreshes the Fisher diagonal (on the calibration set, adapters
in effect), keeps the top-``gamma`` entries of every target matrix as
outliers, and draws one zero-mean noise overlay on the outlier channels from
the frozen base weights.  Each step minimizes

    L(W + z + dW) + beta * L(W + dW),      dW = (alpha / r) U^T V

over the adapter factors only.  The adapters are merged into the base at the
end.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .data import CalibrationSet, Corpus, sample_batch
from .model import LanguageModel, LoraAdapter, Overlay, merge_lora
from .noise import NoiseOverlay, NoiseSpec, sample_noise
from .sensitivity import OutlierMask, fisher_diag, filter_outliers
from .train import Adam, subseed

LAYER_SUBSETS = ("attn_only", "mlp_only", "all")


@dataclass
class NpftConfig:
    gamma: float = 0.005
    beta: float = 0.5
    epochs: int = 6
    lr: float = 1e-4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    target_bits: int = 4
    batch_size: int = 16
    seq_len: int = 128
    steps_per_epoch: int = 50
    layer_subset: str = "all"
    resample: str = "epoch"
    fisher_batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.layer_subset not in LAYER_SUBSETS:
            raise ValueError(f"layer_subset must be one of {LAYER_SUBSETS}")
        if self.resample not in ("epoch", "step"):
            raise ValueError("resample must be 'epoch' or 'step'")

    def noise_spec(self) -> NoiseSpec:
        return dataclasses.replace(self.noise, bits=self.target_bits, seed=subseed(self.seed, "noise"))


@dataclass
class TrainLog:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    initial_grad_norm: float = float("nan")
    base_hash_start: str = ""
    base_hash_before_merge: str = ""
    wall_time: float = 0.0
    masks: list[OutlierMask] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"steps": [dict(zip(("step", "total", "perturbed", "base"), s)) for s in self.steps],
                "epochs": self.epochs, "initial_grad_norm": self.initial_grad_norm,
                "base_hash_start": self.base_hash_start, "base_hash_before_merge": self.base_hash_before_merge,
                "wall_time": self.wall_time}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "total", "perturbed", "base"])
            for s in self.steps:
                w.writerow([s[0]] + [repr(float(v)) for v in s[1:]])
        return path

    def final_epoch_mean(self, column: int = 2) -> float:
        """Mean of a step column (1 total, 2 perturbed, 3 base) over the last epoch."""
        per = len(self.steps) // max(1, len(self.epochs))
        return float(np.mean([s[column] for s in self.steps[-per:]]))


def weights_hash(model: LanguageModel) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()


def init_adapters(model: LanguageModel, cfg: NpftConfig) -> list[LoraAdapter]:
    out = []
    for wid in model.weight_ids(cfg.layer_subset):
        rng = np.random.default_rng(subseed(cfg.seed, f"lora:{wid.key}"))
        out.append(LoraAdapter.init(wid, model.weight(wid).shape, cfg.lora_rank, cfg.lora_alpha,
                                    rng, model.dtype))
    return out


def npft_objective(model: LanguageModel, overlays: NoiseOverlay | Sequence[Overlay],
                   adapters: Sequence[LoraAdapter], batch, beta: float) -> tuple[Tensor, Tensor, Tensor]:
    """(total, perturbed term, base term) with total = perturbed + beta * base."""
    if isinstance(overlays, NoiseOverlay):
        overlays = overlays.overlays()
    term2, _ = model.forward(batch, (), adapters)
    if not overlays:
        # without noise both terms coincide; one pass suffices
        return (term2 if beta == 0 else ad.scale(term2, 1.0 + beta)), term2, term2
    term1, _ = model.forward(batch, overlays, adapters)
    if beta == 0:
        return term1, term1, term2
    return ad.add(term1, ad.scale(term2, beta)), term1, term2


def npft_finetune(model: LanguageModel, train: Corpus | np.ndarray, calib: CalibrationSet, cfg: NpftConfig,
                  log_fn=None) -> tuple[LanguageModel, TrainLog]:
    """Run the fine-tuning loop and return (merged model, log). ``model`` is not modified."""
    tokens = train.tokens if isinstance(train, Corpus) else np.asarray(train)
    log = TrainLog(base_hash_start=weights_hash(model))
    adapters = init_adapters(model, cfg)
    ids = [a.target for a in adapters]
    params = {}
    for a in adapters:
        params[f"{a.target.key}.U"] = a.U.data
        params[f"{a.target.key}.V"] = a.V.data
    opt = Adam(cfg.lr)
    spec = cfg.noise_spec()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        te = time.perf_counter()
        noise: NoiseOverlay | None = None
        mask = None
        fisher_mass = 0.0
        if cfg.gamma > 0:
            F = fisher_diag(model, calib, ids, adapters, cfg.fisher_batch_size)
            if epoch == 0:
                log.initial_grad_norm = F.grad_norm
            mask = filter_outliers(F, cfg.gamma, ids)
            for key, pos in mask.positions.items():
                if len(pos) == 0:
                    warnings.warn(f"gamma={cfg.gamma} selects no outliers in {key} "
                                  f"({np.prod(mask.shapes[key])} entries); matrix skipped")
            log.masks.append(mask)
            fisher_mass = F.mass(mask)
            noise = sample_noise(model, mask, spec, epoch)
        for s in range(cfg.steps_per_epoch):
            if cfg.resample == "step" and mask is not None:
                noise = sample_noise(model, mask, spec, epoch * cfg.steps_per_epoch + s + 1_000_000)
            rng = np.random.default_rng(subseed(cfg.seed, f"npft-batch:{step}"))
            batch = sample_batch(tokens, cfg.batch_size, cfg.seq_len, rng)
            total, term1, term2 = npft_objective(model, noise.overlays() if noise else (), adapters, batch, cfg.beta)
            values = (float(total.data), float(term1.data), float(term2.data))
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteError(f"non-finite NPFT loss at epoch {epoch} step {step}: {values}")
            ad.backward(total)
            ad.release(term2)  # unused by backward when beta == 0
            grads = {}
            for a in adapters:
                grads[f"{a.target.key}.U"] = a.U.grad
                grads[f"{a.target.key}.V"] = a.V.grad
                a.U.zero_grad()
                a.V.zero_grad()
            opt.step(params, grads)
            log.steps.append((step, *values))
            step += 1
        rec = {"epoch": epoch, "mask_size": mask.size if mask is not None else 0,
               "fisher_mass": fisher_mass,
               "noise_rms": noise.stats["rms"] if noise else 0.0,
               "noise_nonzero": noise.stats["n_nonzero"] if noise else 0.0,
               "wall_time": time.perf_counter() - te}
        log.epochs.append(rec)
        if log_fn:
            last = np.mean([x[2] for x in log.steps[-cfg.steps_per_epoch:]])
            log_fn(f"epoch {epoch}: mask {rec['mask_size']}  perturbed-loss {last:.4f}  "
                   f"({rec['wall_time']:.1f}s)")
    log.base_hash_before_merge = weights_hash(model)
    merged = merge_lora(model, adapters)
    log.wall_time = time.perf_counter() - t0
    return merged, log
