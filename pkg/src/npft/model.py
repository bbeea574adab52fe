"""Tiny decoder-only transformer LM with addressable weight matrices.

Weight matrices are stored (d_out, d_in): row ``i`` is output channel ``i``
and a linear layer computes ``x @ W.T``.  Positional information comes from a
fixed sinusoidal table, so the only trainable 2-D matrices are the ones
enumerated by :func:`LanguageModel.weight_ids`.

Forward passes never mutate the stored arrays.  Each call wraps them into
fresh leaf tensors, adds overlay values and LoRA deltas on the fly, and
returns the loss tensor together with the leaves so the caller can read
gradients for whatever it asked to train.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_MATRICES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
GLOBAL_MATRICES = ("embed", "lm_head")
ATTN_MATRICES = LAYER_MATRICES[:4]
MLP_MATRICES = LAYER_MATRICES[4:]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 512
    context_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "context_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError("n_heads must divide d_model")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True, order=True)
class WeightId:
    layer: int
    name: str

    def __post_init__(self):
        if self.name in GLOBAL_MATRICES:
            if self.layer != -1:
                raise ValueError(f"{self.name} is global; use layer=-1")
        elif self.name not in LAYER_MATRICES:
            raise ValueError(f"unknown weight name {self.name!r}")
        elif self.layer < 0:
            raise ValueError("layer index must be >= 0")

    @property
    def key(self) -> str:
        return self.name if self.layer < 0 else f"L{self.layer}.{self.name}"

    def __str__(self):
        return self.key

    @classmethod
    def parse(cls, key: str) -> WeightId:
        if key in GLOBAL_MATRICES:
            return cls(-1, key)
        head, _, name = key.partition(".")
        if not head.startswith("L") or not name:
            raise ValueError(f"bad weight key {key!r}")
        return cls(int(head[1:]), name)


@dataclass
class Overlay:
    """Additive matrix applied at forward time; never written into the stored weight."""

    target: WeightId
    values: np.ndarray


@dataclass
class LoraAdapter:
    target: WeightId
    rank: int
    alpha: float
    U: Tensor  # (rank, d_out)
    V: Tensor  # (rank, d_in)

    @classmethod
    def init(cls, target: WeightId, shape: tuple[int, int], rank: int = 8, alpha: float = 16.0,
             rng: np.random.Generator | None = None, dtype=np.float64) -> LoraAdapter:
        """Zero ``U`` and uniform ``V``: the effective delta starts at exactly zero."""
        if rank <= 0:
            raise ValueError("rank must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        d_out, d_in = shape
        bound = 1.0 / math.sqrt(d_in)
        U = Tensor(np.zeros((rank, d_out), dtype=dtype), requires_grad=True)
        V = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)).astype(dtype), requires_grad=True)
        return cls(target, rank, float(alpha), U, V)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return (self.U.data.T @ self.V.data) * np.asarray(self.scaling, dtype=self.U.dtype)

    def delta_tensor(self) -> Tensor:
        return ad.scale(ad.matmul(ad.transpose(self.U), self.V), self.scaling)

    def parameters(self) -> list[Tensor]:
        return [self.U, self.V]


def sinusoidal_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2 + d % 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)[:, : (d + 1) // 2]
    out[:, 1::2] = np.cos(angle)[:, : d // 2]
    return out.astype(dtype)


class LanguageModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}
        self.overlays: list[Overlay] = []
        self._pos = sinusoidal_positions(cfg.context_len, cfg.d_model, self.dtype)

    # -- addressing -----------------------------------------------------------

    def weight_ids(self, subset: str = "every") -> list[WeightId]:
        """Matrices by subset: ``every`` (incl. embed/lm_head), ``all`` (attention+MLP),
        ``attn_only`` or ``mlp_only``."""
        names = {"every": LAYER_MATRICES, "all": LAYER_MATRICES,
                 "attn_only": ATTN_MATRICES, "mlp_only": MLP_MATRICES}
        if subset not in names:
            raise ValueError(f"unknown subset {subset!r}")
        ids = [WeightId(layer, n) for layer in range(self.cfg.n_layers) for n in names[subset]]
        if subset == "every":
            ids = [WeightId(-1, "embed")] + ids + [WeightId(-1, "lm_head")]
        return ids

    def weight(self, wid: WeightId) -> np.ndarray:
        try:
            return self.params[wid.key]
        except KeyError:
            raise KeyError(f"model has no matrix {wid.key}") from None

    def copy(self) -> LanguageModel:
        out = LanguageModel(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.dtype)
        out.overlays = [Overlay(o.target, o.values.copy()) for o in self.overlays]
        return out

    def astype(self, dtype) -> LanguageModel:
        out = LanguageModel(self.cfg, self.params, dtype)
        out.overlays = [Overlay(o.target, o.values.astype(dtype)) for o in self.overlays]
        return out

    def install(self, overlays: Iterable[Overlay]) -> list[Overlay]:
        installed = []
        for o in overlays:
            if o.values.shape != self.weight(o.target).shape:
                raise ValueError(f"overlay shape {o.values.shape} does not match {o.target}")
            installed.append(o)
        self.overlays.extend(installed)
        return installed

    def remove(self, overlays: Iterable[Overlay]) -> None:
        for o in overlays:
            for i, mine in enumerate(self.overlays):
                if mine is o:
                    del self.overlays[i]
                    break
            else:
                raise ValueError(f"overlay on {o.target} is not installed")

    def clear_overlays(self) -> None:
        self.overlays = []

    # -- forward --------------------------------------------------------------

    def forward(self, tokens, overlays: Sequence[Overlay] = (), adapters: Sequence[LoraAdapter] = (),
                trainable: Iterable[str] | str | None = None, return_logits: bool = False):
        """Return ``(loss, leaves)``; ``leaves`` maps parameter names to their leaf tensors.

        ``trainable`` names the stored parameters whose leaves require grad
        (``"all"`` for every parameter).
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 2:
            raise ValueError(f"tokens must be (batch, seq>=2), got shape {tokens.shape}")
        if tokens.shape[1] > cfg.context_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds context_len {cfg.context_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise IndexError(f"token index out of range [0, {cfg.vocab_size})")

        if trainable == "all":
            trainable = set(self.params)
        trainable = set(trainable or ())
        leaves = {k: Tensor(v, requires_grad=k in trainable) for k, v in self.params.items()}

        extra: dict[str, np.ndarray] = {}
        for o in list(self.overlays) + list(overlays):
            key = o.target.key
            if o.values.shape != self.params[key].shape:
                raise ValueError(f"overlay shape {o.values.shape} does not match {key}")
            extra[key] = o.values if key not in extra else extra[key] + o.values
        by_target: dict[str, LoraAdapter] = {}
        for a in adapters:
            if a.target.key in by_target:
                raise ValueError(f"duplicate adapter on {a.target}")
            by_target[a.target.key] = a

        def W(key: str) -> Tensor:
            w = leaves[key]
            if key in extra:
                z = extra[key].astype(self.dtype, copy=False)
                w = ad.add(w, Tensor(z)) if w.requires_grad else Tensor(w.data + z)
            if key in by_target:
                w = ad.add(w, by_target[key].delta_tensor())
            return w

        def linear(x: Tensor, key: str) -> Tensor:
            return ad.matmul(x, ad.transpose(W(key)))

        inputs, targets = tokens[:, :-1], tokens[:, 1:]
        B, T = inputs.shape
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = ad.add(ad.embedding_lookup(W("embed"), inputs), Tensor(self._pos[:T]))
        for layer in range(cfg.n_layers):
            p = f"L{layer}."
            h = ad.layer_norm(x, leaves[p + "ln1.g"], leaves[p + "ln1.b"])
            q = ad.transpose(ad.reshape(linear(h, p + "attn_q"), (B, T, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(linear(h, p + "attn_k"), (B, T, H, dh)), (0, 2, 3, 1))
            v = ad.transpose(ad.reshape(linear(h, p + "attn_v"), (B, T, H, dh)), (0, 2, 1, 3))
            att = ad.causal_softmax(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh)))
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = ad.add(x, linear(ctx, p + "attn_o"))
            h = ad.layer_norm(x, leaves[p + "ln2.g"], leaves[p + "ln2.b"])
            x = ad.add(x, linear(ad.gelu(linear(h, p + "mlp_in")), p + "mlp_out"))
        x = ad.layer_norm(x, leaves["ln_f.g"], leaves["ln_f.b"])
        logits = linear(x, "lm_head")
        loss = ad.softmax_cross_entropy(logits, targets)
        if return_logits:
            return loss, leaves, logits.data
        return loss, leaves


def build_model(cfg: ModelConfig, dtype=np.float64) -> LanguageModel:
    """Seeded N(0, 0.02) init for matrices; unit gain / zero bias for layer norms."""
    rng = np.random.default_rng(cfg.seed)
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"embed": (V, d)}
    for layer in range(cfg.n_layers):
        p = f"L{layer}."
        shapes.update({p + "attn_q": (d, d), p + "attn_k": (d, d), p + "attn_v": (d, d),
                       p + "attn_o": (d, d), p + "mlp_in": (f, d), p + "mlp_out": (d, f)})
    shapes["lm_head"] = (V, d)
    params = {k: rng.normal(0.0, 0.02, size=s) for k, s in shapes.items()}
    for layer in range(cfg.n_layers):
        for ln in ("ln1", "ln2"):
            params[f"L{layer}.{ln}.g"] = np.ones(d)
            params[f"L{layer}.{ln}.b"] = np.zeros(d)
    params["ln_f.g"] = np.ones(d)
    params["ln_f.b"] = np.zeros(d)
    return LanguageModel(cfg, params, dtype)


def forward_loss(model: LanguageModel, tokens, overlays: Sequence[Overlay] = (),
                 adapters: Sequence[LoraAdapter] = ()) -> Tensor:
    """Mean next-token NLL with effective weights ``W + overlays + (alpha/r) U^T V``."""
    loss, _ = model.forward(tokens, overlays, adapters)
    return loss


def merge_lora(model: LanguageModel, adapters: Sequence[LoraAdapter]) -> LanguageModel:
    seen = set()
    for a in adapters:
        if a.target in seen:
            raise ValueError(f"duplicate adapters on {a.target}")
        seen.add(a.target)
    out = model.copy()
    for a in adapters:
        w = out.weight(a.target)
        delta = a.delta().astype(out.dtype)
        if delta.shape != w.shape:
            raise ValueError(f"adapter delta {delta.shape} does not match {a.target} {w.shape}")
        if np.any(delta):
            out.params[a.target.key] = w + delta
    return out


def window_tokens(corpus_tokens, context_len: int) -> np.ndarray:
    tokens = np.asarray(corpus_tokens)
    n = len(tokens) // context_len
    if n == 0:
        raise ValueError(f"corpus of {len(tokens)} tokens is shorter than one window of {context_len}")
    return tokens[: n * context_len].reshape(n, context_len)


def mean_nll(model: LanguageModel, corpus_tokens, overlays: Sequence[Overlay] = (),
             adapters: Sequence[LoraAdapter] = (), batch_size: int = 32) -> float:
    windows = window_tokens(corpus_tokens, model.cfg.context_len)
    total = 0.0
    for start in range(0, len(windows), batch_size):
        chunk = windows[start:start + batch_size]
        loss, _ = model.forward(chunk, overlays, adapters)
        total += float(loss.data) * len(chunk)
    return total / len(windows)


def perplexity(model: LanguageModel, corpus_tokens, overlays: Sequence[Overlay] = (),
               adapters: Sequence[LoraAdapter] = (), batch_size: int = 32) -> float:
    """exp of the mean NLL over non-overlapping ``context_len`` windows."""
    return math.exp(mean_nll(model, corpus_tokens, overlays, adapters, batch_size))


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
