"""Double-precision tensors with reverse-mode autodiff on an explicit tape.

Every operation here computes in float64 and, when a tape is active, records
a node holding the operation name, its input tensors, the output tensor, and
a backward closure.  ``backward`` replays the tape in reverse, accumulating
gradients into every tensor marked ``requires_grad``.  There is no implicit
broadcasting; shape mismatches raise ``ShapeError`` naming both shapes.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    NumericDegeneracyError,
    ShapeError,
)

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax_rows",
    "layer_norm",
    "sum_all",
    "mean_all",
    "logsumexp_rows",
    "diag_part",
    "l2_normalize_rows",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "transpose",
    "gather_rows",
    "finite_diff_grad",
    "uniform_init",
]


class Tensor:
    """Dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves whose gradient should be materialized by
    ``backward``.  Tensors produced by operations start with the flag off;
    their gradients flow through the tape without being stored.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


# ── Tape ────────────────────────────────────────────────────────────────────

class _Node:
    __slots__ = ("op", "inputs", "output", "bw", "needs")

    def __init__(self, op, inputs, output, bw, needs):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bw = bw
        self.needs = needs


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of forward operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is already a topological order of the
    dataflow graph.  Nested tapes are allowed; only the innermost records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watches(self, t: Tensor) -> bool:
        """True when gradients must flow through or into ``t``."""
        return t.requires_grad or id(t) in self._produced

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               bw: Callable[..., tuple]) -> None:
        needs = tuple(self.watches(t) for t in inputs)
        self.nodes.append(_Node(op, inputs, output, bw, needs))
        self._produced.add(id(output))


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op: str, inputs: tuple[Tensor, ...], output: Tensor, bw) -> None:
    tape = _active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape.record(op, inputs, output, bw)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every watched tensor.

    ``loss`` must be a scalar (a single-element tensor).  Gradients add onto
    whatever is already in ``.grad``; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss.requires_grad and id(loss) not in tape._produced:
        loss.accumulate_grad(seed)
    flowing: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.requires_grad:
            node.output.accumulate_grad(g)
        for inp, need, gi in zip(node.inputs, node.needs, node.bw(g, node.needs)):
            if not need or gi is None:
                continue
            if id(inp) in tape._produced:
                held = flowing.get(id(inp))
                flowing[id(inp)] = gi if held is None else held + gi
            elif inp.requires_grad:
                inp.accumulate_grad(gi)


# ── Shape checks ────────────────────────────────────────────────────────────

def _require_2d(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise ShapeError(f"{name} expects a 2-d tensor, got shape {t.shape}")


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")


# ── Elementwise and linear ops ──────────────────────────────────────────────

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def bw(g, needs):
        ga = g @ bd.T if needs[0] else None
        gb = ad.T @ g if needs[1] else None
        return ga, gb

    _record("matmul", (a, b), out, bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g, needs):
        return g, g

    _record("add", (a, b), out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g, needs):
        return g, -g

    _record("sub", (a, b), out, bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bw(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    _record("mul", (a, b), out, bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def bw(g, needs):
        return (g * s,)

    _record("scale", (a,), out, bw)
    return out


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0.

    np.maximum keeps NaN propagating so divergence stays visible downstream.
    """
    mask = a.data > 0.0
    out = Tensor(np.maximum(a.data, 0.0))

    def bw(g, needs):
        return (g * mask,)

    _record("relu", (a,), out, bw)
    return out


# ── Reductions and row-structured ops ───────────────────────────────────────

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with optional boolean keep-mask.

    ``mask[i, j]`` False freezes entry (i, j) out of row i: its output is
    exactly 0 and no gradient flows through it.  A row with every entry
    masked raises ``DegenerateInputError``.  The row-wise max is subtracted
    before exponentiation so large logits stay finite.
    """
    _require_2d("softmax_rows", x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask shape {mask.shape} does not match input {x.shape}")
        dead = ~mask.any(axis=1)
        if dead.any():
            raise DegenerateInputError(
                f"softmax_rows: rows {np.flatnonzero(dead).tolist()} are fully masked")
        shifted = np.where(mask, x.data, -np.inf)
    else:
        shifted = x.data
    m = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def bw(g, needs):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    _record("softmax_rows", (x,), out, bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with affine parameters.

    Each row is centered and scaled to unit variance (biased estimate, with
    ``eps`` inside the square root), then multiplied by ``gamma`` and shifted
    by ``beta``, both of length d.
    """
    _require_2d("layer_norm", x)
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}")
    eps = float(eps)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = Tensor(xhat * gd + beta.data)

    def bw(g, needs):
        ggamma = (g * xhat).sum(axis=0) if needs[1] else None
        gbeta = g.sum(axis=0) if needs[2] else None
        if needs[0]:
            dxhat = g * gd
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        else:
            gx = None
        return gx, ggamma, gbeta

    _record("layer_norm", (x, gamma, beta), out, bw)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bw(g, needs):
        return (np.full_like(x.data, float(g)),)

    _record("sum_all", (x,), out, bw)
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.sum() / n)

    def bw(g, needs):
        return (np.full_like(x.data, float(g) / n),)

    _record("mean_all", (x,), out, bw)
    return out


def logsumexp_rows(x: Tensor) -> Tensor:
    """Per-row log-sum-exp, returned as a (m, 1) column."""
    _require_2d("logsumexp_rows", x)
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    out = Tensor(m + np.log(s))
    soft = e / s

    def bw(g, needs):
        return (soft * g,)

    _record("logsumexp_rows", (x,), out, bw)
    return out


def diag_part(x: Tensor) -> Tensor:
    """Main diagonal of a square matrix as a (m, 1) column."""
    _require_2d("diag_part", x)
    m, n = x.shape
    if m != n:
        raise ShapeError(f"diag_part expects a square matrix, got shape {x.shape}")
    out = Tensor(np.diagonal(x.data).reshape(m, 1).copy())

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        np.fill_diagonal(gx, g.reshape(-1))
        return (gx,)

    _record("diag_part", (x,), out, bw)
    return out


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm; a zero row is an error."""
    _require_2d("l2_normalize_rows", x)
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (norms == 0.0).any():
        bad = np.flatnonzero(norms.reshape(-1) == 0.0).tolist()
        raise NumericDegeneracyError(f"l2_normalize_rows: rows {bad} have zero norm")
    y = x.data / norms
    out = Tensor(y)

    def bw(g, needs):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    _record("l2_normalize_rows", (x,), out, bw)
    return out


# ── Structural ops ──────────────────────────────────────────────────────────

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors vertically; all must share the column count."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_rows needs at least one tensor")
    for p in parts:
        _require_2d("concat_rows", p)
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        return tuple(g[bounds[i]:bounds[i + 1]] if needs[i] else None
                     for i in range(len(parts)))

    _record("concat_rows", tuple(parts), out, bw)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors horizontally; all must share the row count."""
    parts = list(parts)
    if not parts:
        raise ContractError("concat_cols needs at least one tensor")
    for p in parts:
        _require_2d("concat_cols", p)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None
                     for i in range(len(parts)))

    _record("concat_cols", tuple(parts), out, bw)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_rows", x)
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: range [{start}, {stop}) invalid for shape {x.shape}")
    out = Tensor(x.data[start:stop].copy())

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    _record("slice_rows", (x,), out, bw)
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", x)
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: range [{start}, {stop}) invalid for shape {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    _record("slice_cols", (x,), out, bw)
    return out


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    out = Tensor(x.data.T.copy())

    def bw(g, needs):
        return (g.T,)

    _record("transpose", (x,), out, bw)
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of ``table`` by integer index (an embedding lookup).

    Repeated indices are allowed; their gradients accumulate onto the same
    row.  Out-of-range indices raise ``ContractError``.
    """
    _require_2d("gather_rows", table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather_rows: index out of range for table with {n} rows")
    out = Tensor(table.data[idx].copy())

    def bw(g, needs):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record("gather_rows", (table,), out, bw)
    return out


# ── Gradient checking and initialization ────────────────────────────────────

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` must be a pure function of the current value of ``x``; entries are
    perturbed in place and restored.  Cost is two evaluations of ``f`` per
    element of ``x``.
    """
    if h <= 0.0:
        raise ContractError(f"finite_diff_grad: h must be positive, got {h}")
    flat = x.data.reshape(-1)
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return Tensor(g.reshape(x.shape))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...],
                 low: float = -0.05, high: float = 0.05,
                 requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=requires_grad)
