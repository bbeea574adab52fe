"""Adam and the base-model pre-training loop."""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import sample_batch
from .model import LanguageModel


def subseed(seed: int, purpose: str) -> int:
    """Named 63-bit sub-seed so independent stages draw independent streams."""
    h = hashlib.blake2b(f"{seed}:{purpose}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None):
        """In-place update of ``params`` (arrays keyed like ``grads``)."""
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            params[k] -= upd.astype(params[k].dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"][0])
        for k, arr in state.items():
            if k.startswith("m."):
                self.m[k[2:]] = arr.copy()
            elif k.startswith("v."):
                self.v[k[2:]] = arr.copy()


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    min_lr_frac: float = 0.05
    warmup: int = 50
    batch_size: int = 16
    seq_len: int = 128
    grad_clip: float = 1.0
    log_every: int = 50
    seed: int = 0


@dataclass
class TrainState:
    step: int = 0
    losses: list[tuple[int, float]] = field(default_factory=list)
    final_grad_norm: float = float("nan")
    wall_time: float = 0.0


def lr_at(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    cos = 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cos)


def step_batch(tokens: np.ndarray, cfg: TrainConfig, step: int) -> np.ndarray:
    """Batch for ``step`` depends only on (seed, step), so resumed runs see the same data."""
    rng = np.random.default_rng(subseed(cfg.seed, f"batch:{step}"))
    return sample_batch(tokens, cfg.batch_size, cfg.seq_len, rng)


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def train_base(model: LanguageModel, tokens: np.ndarray, cfg: TrainConfig, opt: Adam | None = None,
               state: TrainState | None = None, until: int | None = None, log=None) -> tuple[Adam, TrainState]:
    """Full-parameter Adam pre-training with warmup + cosine decay, updating ``model`` in place."""
    opt = opt or Adam(cfg.lr)
    state = state or TrainState()
    until = cfg.steps if until is None else min(until, cfg.steps)
    t0 = time.perf_counter()
    while state.step < until:
        batch = step_batch(tokens, cfg, state.step)
        with ad.checked():
            loss, leaves = model.forward(batch, trainable="all")
            ad.backward(loss)
        grads = {k: t.grad for k, t in leaves.items()}
        gn = grad_norm(grads)
        if cfg.grad_clip and gn > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / gn) for k, g in grads.items()}
        opt.step(model.params, grads, lr_at(cfg, state.step))
        state.losses.append((state.step, float(loss.data)))
        state.final_grad_norm = gn
        if log and (state.step % cfg.log_every == 0 or state.step == until - 1):
            log(f"step {state.step:5d}  loss {float(loss.data):.4f}  |g| {gn:.3f}")
        state.step += 1
    state.wall_time += time.perf_counter() - t0
    return opt, state
