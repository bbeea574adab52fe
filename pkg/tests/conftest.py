import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from npft import autodiff as ad  # noqa: E402
from npft.data import CalibrationSet  # noqa: E402
from npft.model import ModelConfig, build_model  # noqa: E402
from helpers import bigram_stream  # noqa: E402


class FlatLoss:
    """Loss and gradient of a model as functions of one flat float64 parameter vector."""

    def __init__(self, model, calib: CalibrationSet, keys=None):
        self.model = model
        self.calib = calib
        self.keys = list(keys or model.params)
        self.shapes = [model.params[k].shape for k in self.keys]
        self.sizes = [int(np.prod(s)) for s in self.shapes]

    def get(self) -> np.ndarray:
        return np.concatenate([self.model.params[k].ravel() for k in self.keys])

    def set(self, w: np.ndarray) -> None:
        pos = 0
        for k, s, n in zip(self.keys, self.shapes, self.sizes):
            self.model.params[k] = w[pos:pos + n].reshape(s).copy()
            pos += n

    def loss(self, w) -> float:
        self.set(w)
        loss, _ = self.model.forward(self.calib.segments)
        return float(loss.data)

    def loss_grad(self, w):
        self.set(w)
        loss, leaves = self.model.forward(self.calib.segments, trainable=self.keys)
        ad.backward(loss)
        return float(loss.data), np.concatenate([leaves[k].grad.ravel() for k in self.keys])

    def hvp(self, w, v, h=1e-5) -> np.ndarray:
        """Hessian-vector product by central differences of gradients."""
        gp = self.loss_grad(w + h * v)[1]
        gm = self.loss_grad(w - h * v)[1]
        self.set(w)
        return (gp - gm) / (2 * h)


@pytest.fixture(scope="session")
def converged_toy():
    """Tiny float64 LM at a stationary point of its calibration loss in the LM head.

    All weights are first fitted briefly with L-BFGS; the head is then driven
    to a stationary point by trust-region Newton.  With the features fixed the
    head problem is convex, so this is a genuine local minimum.  Returns
    (FlatLoss over the head, head vector, gradient norm).
    """
    from scipy.optimize import minimize

    cfg = ModelConfig(vocab_size=8, d_model=8, n_layers=1, n_heads=2, d_ff=8, context_len=8, seed=1)
    model = build_model(cfg, np.float64)
    stream = bigram_stream(96 * 8, cfg.vocab_size, seed=0)
    calib = CalibrationSet(stream.reshape(96, 8), seed=0, offsets=np.arange(96) * 8)
    full = FlatLoss(model, calib)
    full.set(minimize(full.loss_grad, full.get(), jac=True, method="L-BFGS-B", options={"maxiter": 300}).x)
    head = FlatLoss(model, calib, ["lm_head"])
    res = minimize(head.loss_grad, head.get(), jac=True, method="trust-exact",
                   hess=lambda w: np.array([head.hvp(w, e) for e in np.eye(len(w))]), options={"gtol": 1e-12})
    gnorm = float(np.linalg.norm(head.loss_grad(res.x)[1]))
    head.set(res.x)
    return head, res.x.copy(), gnorm


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Default-config base model trained from scratch through the pipeline stage.

    Setting NPFT_DESK_CACHE to a directory reuses ``base.ckpt`` there across
    sessions (development only).  Returns (ExperimentConfig, corpora, base
    model, run directory).
    """
    from npft.checkpoint import load_checkpoint
    from npft.config import ExperimentConfig
    from npft.pipeline import load_data, stage_train_base

    cache = os.environ.get("NPFT_DESK_CACHE")
    out = Path(cache) if cache else tmp_path_factory.mktemp("desk")
    cfg = ExperimentConfig(out_dir=str(out))
    if not (out / "base.ckpt").is_file():
        stage_train_base(cfg, out, log=None)
    return cfg, load_data(cfg), load_checkpoint(out / "base.ckpt").model, out


DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
DESK_SEEDS = range(5)


def _desk_arm(desk, seed, **overrides):
    """Fine-tune the desk base with the desk preset; PPL at fp/4/3/2 bits and the log."""
    import dataclasses

    from npft.config import load_config
    from npft.finetune import npft_finetune
    from npft.model import perplexity
    from npft.pipeline import calibration, eval_sets
    from npft.quant import QuantConfig, quantize_model

    cfg, data, base, _ = desk
    ncfg = dataclasses.replace(load_config(DESK_CONFIG).npft, seed=seed, **overrides)
    calib = calibration(cfg, data, seed)
    merged, log = npft_finetune(base, data.train, calib, ncfg)
    toks = eval_sets(cfg, data)["valid"]
    ppl = {"fp": perplexity(merged, toks)}
    for bits in (4, 3, 2):
        ppl[bits] = perplexity(quantize_model(merged, QuantConfig(bits=bits)).model, toks)
    return merged, log, calib, ppl


@pytest.fixture(scope="session")
def desk_ab(desk):
    """NPFT and no-noise control arms for five seeds.

    Each row holds per-arm PPL (fp, 4, 3, 2 bits), the final-epoch perturbed
    loss, and the Fisher mass on the epoch-0 mask before and after NPFT.
    Returns (rows, seconds).
    """
    import time

    from npft.config import load_config
    from npft.model import WeightId
    from npft.sensitivity import fisher_diag

    base = desk[2]
    gamma = load_config(DESK_CONFIG).npft.gamma
    t0 = time.perf_counter()
    rows = []
    for seed in DESK_SEEDS:
        row = {"seed": seed}
        for arm, g in (("npft", gamma), ("control", 0.0)):
            merged, log, calib, ppl = _desk_arm(desk, seed, gamma=g)
            row[arm] = dict(ppl, perturbed=log.final_epoch_mean(2))
            if arm == "npft":
                mask = log.masks[0]
                ids = [WeightId.parse(k) for k in mask.keys()]
                row["mass_before"] = fisher_diag(base, calib, ids).mass(mask)
                row["mass_after"] = fisher_diag(merged, calib, ids).mass(mask)
        rows.append(row)
    return rows, time.perf_counter() - t0
