"""Independent oracles shared across test modules."""
import numpy as np

from npft import autodiff as ad
from npft.model import ModelConfig, build_model


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, context_len=8)
    base.update(kw)
    return ModelConfig(**base)


def toy_model(seed: int = 0, dtype=np.float64, **kw):
    return build_model(toy_config(seed=seed, **kw), dtype)


def scalar_gelu(v: float) -> float:
    import math
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def scalar_layer_norm(row, g, b, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((r - mu) ** 2 for r in row) / n
    return [(r - mu) / (var + eps) ** 0.5 * gi + bi for r, gi, bi in zip(row, g, b)]


def leaf(x):
    return ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def bigram_stream(n: int, vocab: int, seed: int) -> np.ndarray:
    """Token stream from a random sparse bigram chain, a learnable toy corpus."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(vocab, 0.3), size=vocab)
    out = np.empty(n, dtype=np.int64)
    out[0] = 0
    for i in range(1, n):
        out[i] = rng.choice(vocab, p=P[out[i - 1]])
    return out
