"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op accepts either :class:`Tensor` or plain ``numpy`` arrays.  With
plain arrays the op is a thin numpy call (used by the search hot path);
with a tensor that requires grad and an active :class:`Tape`, the op is
recorded so that :func:`backward` can replay it.

Tensors are rank 1 or rank 2.  Broadcasting is limited to what rank-2
numpy broadcasting gives (row/column bias adds).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class EmptySupportError(ValueError):
    """A masked distribution has no legal entry."""


class ContractError(ValueError):
    """A caller violated an op precondition."""


_ids = itertools.count()
_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most rank 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.id = next(_ids)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output_id: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops on grad-requiring tensors executed inside
    the ``with`` block are appended in execution (hence topological) order.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    produced: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, kind, inputs, output: Tensor, vjp) -> None:
        self.entries.append(TapeEntry(kind, tuple(inputs), output.id, vjp))
        self.produced.add(output.id)

    def __len__(self) -> int:
        return len(self.entries)


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _emit(kind: str, inputs: Sequence, out_data: np.ndarray, vjp):
    """Wrap ``out_data`` as a tensor and record it when differentiation is live."""
    tensors = [x for x in inputs if isinstance(x, Tensor)]
    if not tensors:
        return out_data
    needs = any(t.requires_grad for t in tensors)
    tape = _active_tape()
    out = Tensor(out_data, requires_grad=False)
    out.is_leaf = False
    if needs and tape is not None:
        out.requires_grad = True
        tape.record(kind, [_as_tensor(x) for x in inputs], out, vjp)
    return out


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = _value(a), _value(b)
    out = av + bv
    if not _any_tensor(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("add", [a, b], out, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _value(a), _value(b)
    out = av - bv
    if not _any_tensor(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("sub", [a, b], out, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = _value(a), _value(b)
    out = av * bv
    if not _any_tensor(a, b):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _emit("mul", [a, b], out,
                 lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def matmul(a, b):
    av, bv = _value(a), _value(b)
    sa, sb = np.shape(av), np.shape(bv)
    if not sa or not sb or sa[-1] != sb[0]:
        raise ShapeError(f"matmul dimension mismatch: {sa} x {sb}")
    out = av @ bv
    if not _any_tensor(a, b):
        return out

    def vjp(g):
        ga = g @ bv.T if bv.ndim == 2 else np.multiply.outer(g, bv)
        if av.ndim == 1:
            gb = np.multiply.outer(av, g) if bv.ndim == 2 else g * av
        else:
            gb = av.T @ g
        return ga.reshape(sa), gb.reshape(sb)

    return _emit("matmul", [a, b], out, vjp)


def tanh(x):
    xv = _value(x)
    out = np.tanh(xv)
    if not isinstance(x, Tensor):
        return out
    return _emit("tanh", [x], out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    xv = _value(x)
    out = 0.5 * (np.tanh(0.5 * xv) + 1.0)
    if not isinstance(x, Tensor):
        return out
    return _emit("sigmoid", [x], out, lambda g: (g * out * (1.0 - out),))


def relu(x):
    xv = _value(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Tensor):
        return out
    return _emit("relu", [x], out, lambda g: (g * (xv > 0.0),))


def exp(x):
    xv = _value(x)
    out = np.exp(xv)
    if not isinstance(x, Tensor):
        return out
    return _emit("exp", [x], out, lambda g: (g * out,))


def log(x):
    xv = _value(x)
    out = np.log(xv)
    if not isinstance(x, Tensor):
        return out
    return _emit("log", [x], out, lambda g: (g / xv,))


# ---------------------------------------------------------------- structure

def concat(xs: Sequence, axis: int = -1):
    vals = [_value(x) for x in xs]
    ndim = vals[0].ndim
    ax = axis % ndim
    out = np.concatenate(vals, axis=ax)
    if not _any_tensor(*xs):
        return out
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _emit("concat", list(xs), out, lambda g: tuple(np.split(g, splits, axis=ax)))


def sum(x, axis: int | None = None):  # noqa: A001
    xv = _value(x)
    if axis not in (None, 0):
        raise ContractError("sum reduces along axis 0 or over all entries")
    out = np.asarray(xv.sum(axis=axis), dtype=np.float64)
    if not isinstance(x, Tensor):
        return out
    shape = xv.shape
    return _emit("sum", [x], out, lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axis: int | None = None):
    n = _value(x).size if axis is None else _value(x).shape[0]
    if n == 0:
        raise ContractError("mean over an empty axis")
    return mul(sum(x, axis), 1.0 / n)


def gather(x, index):
    """Rows (rank 2) or entries (rank 1) of ``x`` at integer ``index``."""
    xv = _value(x)
    idx = np.asarray(index, dtype=np.int64)
    out = xv[idx]
    if not isinstance(x, Tensor):
        return out

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("gather", [x], out, vjp)


def pooling_matrix(segment_ids, num_segments: int, reduce: str = "mean") -> sparse.csr_matrix:
    """Sparse (num_segments x n) matrix mapping rows to segment sums or means."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    n = seg.shape[0]
    w = np.ones(n)
    if reduce == "mean":
        counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
        w = 1.0 / counts[seg] if n else w
    return sparse.csr_matrix((w, (seg, np.arange(n))), shape=(num_segments, n))


def segment_pool(x, pool: sparse.spmatrix):
    """Axis-0 pooling of ``x`` rows into segments with a constant pooling matrix.

    Empty segments produce zero rows; callers add a null vector for them.
    """
    xv = _value(x)
    if pool.shape[1] != xv.shape[0]:
        raise ShapeError(f"pooling matrix {pool.shape} does not match rows {xv.shape}")
    out = np.asarray(pool @ xv)
    if not isinstance(x, Tensor):
        return out
    pt = pool.T.tocsr()
    return _emit("segment_pool", [x], out, lambda g: (np.asarray(pt @ g),))


# ---------------------------------------------------------------- composites

def where(cond, a, b):
    """Pick ``a`` where ``cond`` else ``b``; ``cond`` is constant."""
    m = np.asarray(cond, dtype=np.float64)
    return add(mul(a, m), mul(b, 1.0 - m))


def minimum(a, b):
    return where(_value(a) <= _value(b), a, b)


def clip(x, lo: float, hi: float):
    xv = _value(x)
    inside = (xv >= lo) & (xv <= hi)
    const = np.where(xv < lo, lo, hi)
    return where(inside, x, const)


def softmax(x, mask=None):
    """Max-stabilised softmax over the last axis; masked entries are exactly 0."""
    xv = _value(x)
    if mask is None:
        m = np.ones(xv.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
    if not m.any(axis=-1).all():
        raise EmptySupportError("softmax: every entry is masked")
    shift = np.where(m, xv, -np.inf).max(axis=-1, keepdims=True)
    z = sub(x, shift)
    e = mul(exp(where(m, z, 0.0)), m.astype(np.float64))
    ev = _value(e)
    denom = ev.sum(axis=-1, keepdims=True)
    if not _any_tensor(x):
        return ev / denom
    # p = e / sum(e): differentiate through e with the quotient rule.
    p = ev / denom

    def vjp(g):
        return ((g - (g * p).sum(axis=-1, keepdims=True)) / denom,)

    return _emit("normalize", [e], p, vjp)


def log_softmax_segments(logits, segment_ids, num_segments: int, legal):
    """Per-segment masked log-softmax of a flat logit vector.

    Illegal entries get ``-inf``-free placeholder values of 0 in the output
    and must be ignored by the caller (their probability is exactly 0).
    """
    lv = _value(logits)
    seg = np.asarray(segment_ids, dtype=np.int64)
    legal = np.asarray(legal, dtype=bool)
    if not np.bincount(seg[legal], minlength=num_segments).all():
        raise EmptySupportError("a segment has no legal entry")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, seg[legal], lv[legal])
    z = sub(logits, seg_max[seg])
    e = mul(exp(where(legal, z, 0.0)), legal.astype(np.float64))
    pool = pooling_matrix(seg, num_segments, reduce="sum")
    denom = segment_pool(e, pool)
    lse = log(gather(denom, seg))
    return where(legal, sub(z, lse), 0.0)


# ---------------------------------------------------------------- recurrent cell

def gru_cell(x, h, params):
    """Gated recurrent update.

    ``params`` maps ``W_z, b_z, W_r, b_r, W_h, b_h``; each ``W`` has shape
    ``(d_in + d_h, d_h)``.  ``x`` and ``h`` may be rank 1 or batched rank 2.
    """
    d_in, d_h = np.shape(_value(x))[-1], np.shape(_value(h))[-1]
    for key in ("W_z", "W_r", "W_h"):
        if np.shape(_value(params[key])) != (d_in + d_h, d_h):
            raise ShapeError(
                f"gru_cell: {key} has shape {np.shape(_value(params[key]))}, "
                f"expected {(d_in + d_h, d_h)}"
            )
    xh = concat([x, h])
    z = sigmoid(add(matmul(xh, params["W_z"]), params["b_z"]))
    r = sigmoid(add(matmul(xh, params["W_r"]), params["b_r"]))
    cand = tanh(add(matmul(concat([x, mul(r, h)]), params["W_h"]), params["b_h"]))
    return add(mul(sub(1.0, z), h), mul(z, cand))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Accumulation is additive; zero gradients explicitly between updates.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else np.shape(loss)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if loss.id not in tape.produced:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                leaves[inp.id] = inp
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        if g is not None:
            leaf.grad = leaf.grad + g.reshape(leaf.shape)
