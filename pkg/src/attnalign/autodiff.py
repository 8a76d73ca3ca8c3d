"""Dense float64 tensors with reverse-mode automatic differentiation.

Tensors are 0-d scalars, 1-d vectors or 2-d matrices over float64 (plus
[B x m x n] planes for the batched head ops); there is no broadcasting
beyond the handful of patterns the models here need. Each differentiable
op records its parents and a backward closure on the output tensor, so
the op graph doubles as the tape and is rebuilt on every forward pass
(selection-dependent graph topology makes a static graph useless).
``Tensor.backward()`` walks the graph once in reverse topological order
and accumulates gradients additively into every ``requires_grad`` leaf;
callers zero gradients between steps.

Backward-closure contract (performance-critical): a closure receives the
output gradient ``g``, which it owns exclusively, and hands each parent
a contribution via ``sink``. Contributions are adopted without copying,
so a closure must never pass overlapping writable memory to two
different parents (``g`` itself may go to at most one), must skip
parents with ``requires_grad`` False before doing expensive work, and
must not touch a contribution after sinking it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateRowError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient and backward rule.

    Data is immutable by convention once the tensor participates in a
    graph; only ``grad`` mutates, and only through accumulation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # adopt when possible; g is exclusively ours at this point
            self.grad = g if g.flags.writeable and g.shape == self.data.shape \
                else np.array(np.broadcast_to(g, self.data.shape))
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output.

        Gradients land on ``requires_grad`` leaves (tensors without a
        recorded op). Intermediate gradients live only for the duration
        of the call, so running backward twice on the same graph after a
        grad reset reproduces identical leaf gradients.
        """
        if self.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            nid = id(node)
            if nid in seen:
                continue
            seen.add(nid)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}

        def sink(parent: Tensor, contrib) -> None:
            # adoption contract: see module docstring
            if not parent.requires_grad:
                return
            key = id(parent)
            cur = grads.get(key)
            if cur is None:
                grads[key] = contrib
            elif cur.flags.writeable:
                cur += contrib
            else:
                grads[key] = cur + contrib

        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                if not g.flags.writeable:
                    g = np.array(g)
                node._backward(g, sink)
            else:
                node._accumulate(g)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    """Elementwise sum; also matrix + row-vector and anything + scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def back(g, sink):
            if a.requires_grad and b.requires_grad:
                sink(a, g)
                sink(b, g.copy())
            elif a.requires_grad:
                sink(a, g)
            elif b.requires_grad:
                sink(b, g)
    elif b.shape == () or a.shape == ():
        if a.shape == ():  # keep the array operand first
            a, b = b, a
        def back(g, sink):
            if b.requires_grad:
                sink(b, np.asarray(np.sum(g)))
            if a.requires_grad:
                sink(a, g)
    elif len(a.shape) == 2 and b.shape == (a.shape[1],):
        def back(g, sink):
            if b.requires_grad:
                sink(b, g.sum(axis=0))
            if a.requires_grad:
                sink(a, g)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _wrap(a.data + b.data, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def back(g, sink):
        sink(a, -g)

    return _wrap(-a.data, (a,), back)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def back(g, sink):
            if a.requires_grad:
                sink(a, g * b.data)
            if b.requires_grad:
                sink(b, g * a.data)
    elif b.shape == () or a.shape == ():
        if a.shape == ():
            a, b = b, a
        def back(g, sink):
            if a.requires_grad:
                sink(a, g * b.data)
            if b.requires_grad:
                sink(b, np.asarray(np.sum(g * a.data)))
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _wrap(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    """Elementwise quotient; denominator may be a scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        def back(g, sink):
            if a.requires_grad:
                sink(a, g / b.data)
            if b.requires_grad:
                sink(b, -g * a.data / (b.data * b.data))
    elif b.shape == ():
        def back(g, sink):
            if a.requires_grad:
                sink(a, g / b.data)
            if b.requires_grad:
                sink(b, np.asarray(np.sum(-g * a.data) / (b.data * b.data)))
    else:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    return _wrap(a.data / b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    """Matrix product of 2-d tensors; grad_a = g b^T, grad_b = a^T g."""
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")

    def back(g, sink):
        if a.requires_grad:
            sink(a, g @ b.data.T)
        if b.requires_grad:
            sink(b, a.data.T @ g)

    return _wrap(a.data @ b.data, (a, b), back)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")

    def back(g, sink):
        sink(a, g.T)

    return _wrap(a.data.T, (a,), back)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def back(g, sink):
        sink(a, g.reshape(a.shape))

    return _wrap(a.data.reshape(shape), (a,), back)


# ---------------------------------------------------------------------------
# structure: concatenation, slicing, gathering


def concat_rows(parts: Sequence) -> Tensor:
    """Stack 2-d tensors with equal column counts along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of an empty sequence")
    cols = parts[0].shape[1]
    offsets = [0]
    for p in parts:
        if len(p.shape) != 2 or p.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column mismatch {p.shape} vs ({parts[0].shape})"
            )
        offsets.append(offsets[-1] + p.shape[0])

    def back(g, sink):
        # disjoint row views of g, safe to hand to distinct parents
        for p, s, e in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sink(p, g[s:e])

    return _wrap(np.concatenate([p.data for p in parts], axis=0), parts, back)


def take(a, indices) -> Tensor:
    """Gather rows of a matrix or elements of a vector by index."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"take expects a 1-d index list, got shape {idx.shape}")
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"take expects a 1-d or 2-d tensor, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for first axis of {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        sink(a, z)

    return _wrap(a.data[idx], (a,), back)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if len(a.shape) != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows[{start}:{stop}] invalid for shape {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        sink(a, z)

    return _wrap(a.data[start:stop], (a,), back)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if len(a.shape) != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols[{start}:{stop}] invalid for shape {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        z[:, start:stop] = g
        sink(a, z)

    return _wrap(a.data[:, start:stop], (a,), back)


def submatrix(a, rows, col_start: int, col_stop: int) -> Tensor:
    """Gather rows then a contiguous column range in one op."""
    a = _as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    if len(a.shape) != 2 or not (0 <= col_start <= col_stop <= a.shape[1]):
        raise ShapeError(f"submatrix cols[{col_start}:{col_stop}] invalid for {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"submatrix: row index out of range for {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        np.add.at(z[:, col_start:col_stop], idx, g)
        sink(a, z)

    return _wrap(a.data[idx, col_start:col_stop], (a,), back)


def element(a, index: tuple[int, ...]) -> Tensor:
    """A single entry as a 0-d tensor."""
    a = _as_tensor(a)
    if len(index) != a.data.ndim:
        raise ShapeError(f"element index {index} does not match shape {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        z[index] = g
        sink(a, z)

    return _wrap(np.asarray(a.data[index]), (a,), back)


# ---------------------------------------------------------------------------
# reductions and row ops


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def back(g, sink):
        sink(a, np.full(a.shape, g, dtype=np.float64))

    return _wrap(np.asarray(a.data.sum()), (a,), back)


def mean_pool_rows(a) -> Tensor:
    """Column-wise arithmetic mean; an [m x n] matrix pools to [n]."""
    a = _as_tensor(a)
    if len(a.shape) != 2 or a.shape[0] < 1:
        raise ShapeError(f"mean_pool_rows needs a nonempty 2-d tensor, got {a.shape}")
    m = a.shape[0]

    def back(g, sink):
        sink(a, np.broadcast_to(g / m, a.shape))

    return _wrap(a.data.mean(axis=0), (a,), back)


def scale_rows(a, s) -> Tensor:
    """Scale row i of a matrix by s[i]."""
    a, s = _as_tensor(a), _as_tensor(s)
    if len(a.shape) != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: shapes {a.shape} and {s.shape} do not align")

    def back(g, sink):
        if a.requires_grad:
            sink(a, g * s.data[:, None])
        if s.requires_grad:
            sink(s, (g * a.data).sum(axis=1))

    return _wrap(a.data * s.data[:, None], (a, s), back)


def softmax_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax, stabilized by row-max subtraction.

    ``mask`` marks visible entries with True; masked entries come out
    exactly 0. A row with no visible entry raises DegenerateRowError.
    """
    a = _as_tensor(a)
    if len(a.shape) != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != input {a.shape}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise DegenerateRowError(f"softmax row {bad} is fully masked")
        neg = np.where(mask, x, -np.inf)
        rowmax = neg.max(axis=1, keepdims=True)
        e = np.exp(np.where(mask, x - rowmax, 0.0)) * mask
    else:
        rowmax = x.max(axis=1, keepdims=True)
        e = np.exp(x - rowmax)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g, sink):
        dot = (g * y).sum(axis=1, keepdims=True)
        sink(a, y * (g - dot))

    return _wrap(y, (a,), back)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def _gelu_value_slope(x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * (x2 * x)))
    du = _GELU_C * (1.0 + 3 * _GELU_K * x2)
    return 0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * ((1.0 - t * t) * du)


def gelu(a) -> Tensor:
    """Smooth ReLU-family activation (tanh form)."""
    a = _as_tensor(a)
    y, slope = _gelu_value_slope(a.data)

    def back(g, sink):
        sink(a, g * slope)

    return _wrap(y, (a,), back)


def mlp_two_layer(x, w1, b1, w2, b2) -> Tensor:
    """gelu(x w1 + b1) w2 + b2 as one tape node (router MLPs)."""
    x, w1, b1, w2, b2 = (_as_tensor(t) for t in (x, w1, b1, w2, b2))
    if len(x.shape) != 2 or x.shape[1] != w1.shape[0] \
            or w1.shape[1] != w2.shape[0] \
            or b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
        raise ShapeError(
            f"mlp_two_layer: shapes {x.shape}, {w1.shape}, {b1.shape}, "
            f"{w2.shape}, {b2.shape} do not chain"
        )
    u = x.data @ w1.data + b1.data
    hidden, slope = _gelu_value_slope(u)
    out = hidden @ w2.data + b2.data

    def back(g, sink):
        if b2.requires_grad:
            sink(b2, g.sum(axis=0))
        if w2.requires_grad:
            sink(w2, hidden.T @ g)
        gu = (g @ w2.data.T) * slope
        if b1.requires_grad:
            sink(b1, gu.sum(axis=0))
        if w1.requires_grad:
            sink(w1, x.data.T @ gu)
        if x.requires_grad:
            sink(x, gu @ w1.data.T)

    return _wrap(out, (x, w1, b1, w2, b2), back)


def layer_norm_rows(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row standardization with learnable gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if len(a.shape) != 2 or gain.shape != (a.shape[1],) or bias.shape != (a.shape[1],):
        raise ShapeError(
            f"layer_norm_rows: shapes {a.shape}, {gain.shape}, {bias.shape} disagree"
        )
    x = a.data
    n = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain.data + bias.data

    def back(g, sink):
        if a.requires_grad:
            gx_hat = g * gain.data
            sink(
                a,
                inv / n * (n * gx_hat
                           - gx_hat.sum(axis=1, keepdims=True)
                           - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True)),
            )
        if gain.requires_grad:
            sink(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            sink(bias, g.sum(axis=0))

    return _wrap(y, (a, gain, bias), back)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.intp)
    if len(logits.shape) != 2 or tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {tgt.shape}"
        )
    t, v = logits.shape
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(t), tgt].mean()

    def back(g, sink):
        p = np.exp(logp)
        p[np.arange(t), tgt] -= 1.0
        sink(logits, g * p / t)

    return _wrap(np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------
# batched head ops: [H x S x S] planes for multi-head attention


def split_heads(x, n_heads: int) -> Tensor:
    """[S x H*dh] columns, head-major, into [H x S x dh] planes."""
    x = _as_tensor(x)
    s, d = x.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible into {n_heads} heads")
    dh = d // n_heads

    def back(g, sink):
        sink(x, g.transpose(1, 0, 2).reshape(s, d))

    return _wrap(x.data.reshape(s, n_heads, dh).transpose(1, 0, 2), (x,), back)


def merge_heads(x) -> Tensor:
    """[H x S x dh] planes back into [S x H*dh] columns."""
    x = _as_tensor(x)
    h, s, dh = x.shape

    def back(g, sink):
        sink(x, g.reshape(s, h, dh).transpose(1, 0, 2))

    return _wrap(x.data.transpose(1, 0, 2).reshape(s, h * dh), (x,), back)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    if len(a.shape) != 3:
        raise ShapeError(f"transpose_last2 needs a 3-d tensor, got {a.shape}")

    def back(g, sink):
        sink(a, g.swapaxes(1, 2))

    return _wrap(a.data.swapaxes(1, 2), (a,), back)


def bmm(a, b) -> Tensor:
    """Plane-wise matrix product of [B x m x k] and [B x k x n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if len(a.shape) != 3 or len(b.shape) != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")

    def back(g, sink):
        if a.requires_grad:
            sink(a, g @ b.data.swapaxes(1, 2))
        if b.requires_grad:
            sink(b, a.data.swapaxes(1, 2) @ g)

    return _wrap(a.data @ b.data, (a, b), back)


def softmax_heads(a, mask: np.ndarray | None = None) -> Tensor:
    """Last-axis softmax over [H x S x S] planes with one shared [S x S] mask."""
    a = _as_tensor(a)
    if len(a.shape) != 3:
        raise ShapeError(f"softmax_heads needs a 3-d tensor, got {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[1:]:
            raise ShapeError(f"mask {mask.shape} does not cover planes {a.shape[1:]}")
        if not mask.any(axis=1).all():
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise DegenerateRowError(f"softmax row {bad} is fully masked")
        neg = np.where(mask[None], x, -np.inf)
        rowmax = neg.max(axis=2, keepdims=True)
        e = np.exp(np.where(mask[None], x - rowmax, 0.0)) * mask[None]
    else:
        e = np.exp(x - x.max(axis=2, keepdims=True))
    y = e / e.sum(axis=2, keepdims=True)

    def back(g, sink):
        dot = (g * y).sum(axis=2, keepdims=True)
        sink(a, y * (g - dot))

    return _wrap(y, (a,), back)


def take_plane(a, index: int) -> Tensor:
    """Plane i of a [B x m x n] tensor as a 2-d tensor."""
    a = _as_tensor(a)
    if len(a.shape) != 3 or not (0 <= index < a.shape[0]):
        raise ShapeError(f"take_plane({index}) invalid for shape {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        z[index] = g
        sink(a, z)

    return _wrap(a.data[index], (a,), back)


def plane_submatrix(a, index: int, rows, col_start: int, col_stop: int) -> Tensor:
    """Rows x column-range of one plane, in a single op."""
    a = _as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    if len(a.shape) != 3 or not (0 <= index < a.shape[0]) \
            or not (0 <= col_start <= col_stop <= a.shape[2]):
        raise ShapeError(f"plane_submatrix invalid for shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"plane_submatrix: row index out of range for {a.shape}")

    def back(g, sink):
        z = np.zeros_like(a.data)
        np.add.at(z[index, :, col_start:col_stop], idx, g)
        sink(a, z)

    return _wrap(a.data[index][idx, col_start:col_stop], (a,), back)


# ---------------------------------------------------------------------------
# fused adapter ops (single tape nodes; backward rules spelled out by hand)


def linear_with_lora(x, w, lora_a=None, lora_b=None, scale: float = 1.0) -> Tensor:
    """x @ w^T plus the low-rank correction scale * (x A^T) B^T."""
    x, w = _as_tensor(x), _as_tensor(w)
    if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    if lora_a is None:
        def back0(g, sink):
            if x.requires_grad:
                sink(x, g @ w.data)
            if w.requires_grad:
                sink(w, g.T @ x.data)
        return _wrap(x.data @ w.data.T, (x, w), back0)

    a, b = _as_tensor(lora_a), _as_tensor(lora_b)
    if a.shape[1] != x.shape[1] or b.shape != (w.shape[0], a.shape[0]):
        raise ShapeError(
            f"lora shapes A {a.shape} / B {b.shape} do not fit weight {w.shape}"
        )
    u = x.data @ a.data.T
    out = x.data @ w.data.T + scale * (u @ b.data.T)

    def back(g, sink):
        gb_in = g @ b.data          # [S x r]
        if x.requires_grad:
            sink(x, g @ w.data + scale * (gb_in @ a.data))
        if w.requires_grad:
            sink(w, g.T @ x.data)
        if a.requires_grad:
            sink(a, scale * gb_in.T @ x.data)
        if b.requires_grad:
            sink(b, scale * g.T @ u)

    return _wrap(out, (x, w, a, b), back)


def lowrank_mix_apply(x, alpha, lora_as: Sequence, lora_bs: Sequence,
                      scale: float = 1.0) -> Tensor:
    """x @ (sum_o alpha_o scale B_o A_o)^T without materializing the mixture."""
    x, alpha = _as_tensor(x), _as_tensor(alpha)
    lora_as = [_as_tensor(a) for a in lora_as]
    lora_bs = [_as_tensor(b) for b in lora_bs]
    n_exp = len(lora_as)
    if alpha.shape != (n_exp,) or len(lora_bs) != n_exp:
        raise ShapeError(f"alpha {alpha.shape} does not match {n_exp} experts")
    us = [x.data @ a.data.T for a in lora_as]
    ys = [u @ b.data.T for u, b in zip(us, lora_bs)]
    out = sum(alpha.data[o] * scale * ys[o] for o in range(n_exp))

    def back(g, sink):
        galpha = np.empty(n_exp)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        for o in range(n_exp):
            galpha[o] = scale * float((g * ys[o]).sum())
            gb_in = g @ lora_bs[o].data
            coeff = alpha.data[o] * scale
            if gx is not None:
                gx += coeff * (gb_in @ lora_as[o].data)
            if lora_as[o].requires_grad:
                sink(lora_as[o], coeff * gb_in.T @ x.data)
            if lora_bs[o].requires_grad:
                sink(lora_bs[o], coeff * g.T @ us[o])
        if alpha.requires_grad:
            sink(alpha, galpha)
        if gx is not None:
            sink(x, gx)

    return _wrap(out, (x, alpha, *lora_as, *lora_bs), back)


def lowrank_rows_apply(x, weights, lora_as: Sequence, lora_bs: Sequence,
                       scale: float = 1.0) -> Tensor:
    """Row-wise expert mixture: out_c = x_c @ (sum_o w[c,o] scale B_o A_o)^T."""
    x, weights = _as_tensor(x), _as_tensor(weights)
    lora_as = [_as_tensor(a) for a in lora_as]
    lora_bs = [_as_tensor(b) for b in lora_bs]
    n_exp = len(lora_as)
    if len(weights.shape) != 2 or weights.shape != (x.shape[0], n_exp):
        raise ShapeError(
            f"weights {weights.shape} do not match rows {x.shape[0]} x {n_exp}"
        )
    us = [x.data @ a.data.T for a in lora_as]
    ys = [u @ b.data.T for u, b in zip(us, lora_bs)]
    out = sum(weights.data[:, o:o + 1] * scale * ys[o] for o in range(n_exp))

    def back(g, sink):
        gw = np.empty_like(weights.data)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        for o in range(n_exp):
            gw[:, o] = scale * (g * ys[o]).sum(axis=1)
            g_w = g * (scale * weights.data[:, o:o + 1])
            gb_in = g_w @ lora_bs[o].data
            if gx is not None:
                gx += gb_in @ lora_as[o].data
            if lora_as[o].requires_grad:
                sink(lora_as[o], gb_in.T @ x.data)
            if lora_bs[o].requires_grad:
                sink(lora_bs[o], g_w.T @ us[o])
        if weights.requires_grad:
            sink(weights, gw)
        if gx is not None:
            sink(x, gx)

    return _wrap(out, (x, weights, *lora_as, *lora_bs), back)


# ---------------------------------------------------------------------------
# gradient verification


def _scalar_value(y) -> float:
    if not isinstance(y, Tensor) or y.shape != ():
        raise ShapeError("finite_diff_check needs a scalar Tensor result")
    val = float(y.data)
    if not np.isfinite(val):
        raise NumericError(f"objective evaluated to non-finite value {val}")
    return val


def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Worst-coordinate gradient error of f at x.

    Returns max_i |analytic_i - central_i| / max(1, |central_i|), where
    central_i is the central difference (f(x + step e_i) - f(x - step
    e_i)) / (2 step). Mutates x.data in place during probing and
    restores it; x.grad is left holding the analytic gradient.
    """
    x.zero_grad()
    y = f(x)
    _scalar_value(y)
    y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = np.array(analytic)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _scalar_value(f(x))
        flat[i] = orig - step
        fm = _scalar_value(f(x))
        flat[i] = orig
        central = (fp - fm) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst


def finite_diff_check_params(f, params: Iterable[Tensor], step: float = 1e-4) -> float:
    """Worst gradient error of a no-argument objective over many leaves."""
    params = list(params)
    for p in params:
        p.zero_grad()
    y = f()
    _scalar_value(y)
    y.backward()
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar_value(f())
            flat[i] = orig - step
            fm = _scalar_value(f())
            flat[i] = orig
            central = (fp - fm) / (2.0 * step)
            err = abs(gf[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
