"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive that touches a tensor with ``requires_grad`` appends a node to
a :class:`Tape`.  Tapes created by independent forward passes are merged
lazily when their results meet in a later op, so two forward passes can be
combined into one objective and differentiated with a single ``backward``.

Broadcasting is limited to a leading batch prefix: in ``add``/``mul`` the
smaller operand's shape must equal the trailing dimensions of the larger one.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "checked",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "embedding_lookup",
    "layer_norm",
    "gelu",
    "causal_softmax",
    "softmax_cross_entropy",
    "sum_all",
    "backward",
    "release",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_CHECKED = False


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise NonFiniteError as soon as any op produces NaN or Inf."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, enabled
    try:
        yield
    finally:
        _CHECKED = prev


class Tape:
    """Ordered record of primitive ops; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._merged_into: Tape | None = None

    def root(self) -> Tape:
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        return tape

    def __len__(self):
        return len(self.root().nodes)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _join_tapes(inputs: Sequence[Tensor]) -> Tape:
    tapes = []
    for t in inputs:
        if t._tape is not None:
            root = t._tape.root()
            if root.consumed:
                raise TapeError("input belongs to a tape that was already consumed by backward()")
            if all(root is not seen for seen in tapes):
                tapes.append(root)
    if not tapes:
        return Tape()
    head = tapes[0]
    for other in tapes[1:]:
        # disjoint tapes: concatenation keeps topological order
        head.nodes.extend(other.nodes)
        other.nodes = []
        other._merged_into = head
    return head


def _record(name: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by {name}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _join_tapes(inputs)
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn, name))
        out._tape = tape
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] != small.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ beyond a leading batch prefix")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None,
                _reduce_to(g, b.shape) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None,
                -_reduce_to(g, b.shape) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g, needs):
        return (_reduce_to(g * b.data, a.shape) if needs[0] else None,
                _reduce_to(g * a.data, b.shape) if needs[1] else None)

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = np.asarray(c, dtype=a.dtype)

    def bw(g, needs):
        return (g * c_arr,)

    return _record("scale", a.data * c_arr, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., m, k) and ``b`` of shape (k, n) or (..., k, n)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def bw(g, needs):
        ga = gb = None
        if needs[0]:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if needs[1]:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, needs):
        return (np.transpose(g, inverse),)

    return _record("transpose", np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g, needs):
        return (g.reshape(a.shape),)

    return _record("reshape", a.data.reshape(tuple(shape)), (a,), bw)


def embedding_lookup(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"token index out of range [0, {n})")

    def bw(g, needs):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record("embedding_lookup", table.data[idx], (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def bw(g, needs):
        gx = gg = gb = None
        if needs[0]:
            gxhat = g * gain.data
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _record("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def bw(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _record("gelu", 0.5 * xd * (1.0 + th), (x,), bw)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis of (..., T, T) scores with future positions masked out."""
    t1, t2 = scores.shape[-2:]
    if t1 != t2:
        raise ShapeError(f"causal_softmax needs square trailing dims, got {scores.shape}")
    future = np.triu(np.ones((t1, t2), dtype=bool), k=1)
    s = np.where(future, -np.inf, scores.data)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("causal_softmax", p, (scores,), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target index out of range [0, {v})")
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    n = flat.shape[0]
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), tflat]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def bw(g, needs):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tflat] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _record("softmax_cross_entropy", out, (logits,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g, needs):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum_all", np.asarray(a.data.sum(), dtype=a.dtype), (a,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not on a tape (no input requires grad)")
    tape = loss._tape.root()
    if tape.consumed:
        raise TapeError("backward() already called on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.backward_fn(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            if t._tape is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.consumed = True
    tape.nodes = []


def release(t: Tensor) -> None:
    """Free the graph behind ``t`` without differentiating it.

    Tapes reference their outputs and vice versa, so an abandoned graph is only
    reclaimed by the cyclic collector; releasing it frees the activations now.
    """
    if t._tape is None:
        return
    tape = t._tape.root()
    if tape.consumed:
        return
    tape.consumed = True
    tape.nodes = []
