"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that live on it;
:func:`backward` replays the records in reverse to populate leaf gradients.
Tensors built without a tape (``tape=None`` leaves, or ops whose inputs carry
no tape) evaluate forward-only, which is what inference uses.

Everything is float64. The networks in this package are small, so precision
wins over speed and keeps finite-difference checks tight.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    NumericDomainError,
    ShapeError,
    TapeStateError,
    TrainingDivergedError,
)

__all__ = [
    "DiffTensor",
    "Tape",
    "backward",
    "AdamState",
    "ModelParams",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "leaky_relu",
    "exp",
    "log",
    "powc",
    "softmax_rows",
    "concat",
    "gather_rows",
    "scatter_add_rows",
    "segment_sum",
    "segment_softmax",
    "reduce_sum",
    "reduce_mean",
    "dropout_mask",
    "layernorm_rows",
]


class DiffTensor:
    """Dense float64 array participating in (at most) one tape."""

    __slots__ = ("values", "grad", "tape", "name")

    def __init__(self, values, tape=None, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.values.shape}{tag})"


class Tape:
    """Ordered record of primitive applications; replayed in reverse by backward()."""

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)
        self._leaves = []
        self._consumed = False

    def leaf(self, values, name=None):
        """Register a leaf tensor whose gradient backward() will populate."""
        t = DiffTensor(values, tape=self, name=name)
        self._leaves.append(t)
        return t

    def record(self, output, inputs, backward_fn):
        self._records.append((output, inputs, backward_fn))

    @property
    def leaves(self):
        return list(self._leaves)


def _values(x):
    return x.values if isinstance(x, DiffTensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, DiffTensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _emit(tape, out_values, inputs, backward_fn):
    out = DiffTensor(out_values, tape=tape)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def backward(tape, loss):
    """Populate ``grad`` on every leaf of ``tape`` with d(loss)/d(leaf).

    ``loss`` must be scalar (shape () or (1,)). A tape can run backward once.
    Leaves that did not contribute to the loss receive a zero gradient.
    """
    if not isinstance(tape, Tape):
        raise ContractError("backward requires a Tape")
    if tape._consumed:
        raise TapeStateError("tape already consumed by a previous backward pass")
    if loss.values.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.values.shape}")
    tape._consumed = True

    grads = {id(loss): np.ones_like(loss.values)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, backward_fn(g)):
            if gi is None or not isinstance(inp, DiffTensor):
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi

    for leaf in tape._leaves:
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.values) if g is None else np.asarray(g)
    # a consumed tape cannot run backward again; drop the recorded closures
    # so intermediate arrays free without waiting for a gc cycle
    tape._records.clear()


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = _values(a), _values(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} x {bv.shape} do not conform")
    tape = _tape_of(a, b)

    def bwd(g):
        return g @ bv.T, av.T @ g

    return _emit(tape, av @ bv, (a, b), bwd)


def _broadcast_back(g, shape):
    """Reduce gradient g to ``shape`` (row-wise / scalar broadcasting only)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return np.sum(g).reshape(shape)
    # (N, D) reduced to (D,) or (1, D)
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return np.sum(g, axis=0)
    if len(shape) == 2 and shape[0] == 1 and g.ndim == 2 and g.shape[1] == shape[1]:
        return np.sum(g, axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1 and g.ndim == 2 and g.shape[0] == shape[0]:
        return np.sum(g, axis=1, keepdims=True)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(av, bv, opname):
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ShapeError(f"{opname} shapes {av.shape} and {bv.shape} do not broadcast") from None


def add(a, b):
    av, bv = _values(a), _values(b)
    _check_broadcast(av, bv, "add")
    tape = _tape_of(a, b)

    def bwd(g):
        return _broadcast_back(g, av.shape), _broadcast_back(g, bv.shape)

    return _emit(tape, av + bv, (a, b), bwd)


def sub(a, b):
    av, bv = _values(a), _values(b)
    _check_broadcast(av, bv, "sub")
    tape = _tape_of(a, b)

    def bwd(g):
        return _broadcast_back(g, av.shape), _broadcast_back(-g, bv.shape)

    return _emit(tape, av - bv, (a, b), bwd)


def mul(a, b):
    av, bv = _values(a), _values(b)
    _check_broadcast(av, bv, "mul")
    tape = _tape_of(a, b)

    def bwd(g):
        return _broadcast_back(g * bv, av.shape), _broadcast_back(g * av, bv.shape)

    return _emit(tape, av * bv, (a, b), bwd)


def scale(a, c):
    """Multiply by a python float constant."""
    av = _values(a)
    c = float(c)
    tape = _tape_of(a)
    return _emit(tape, av * c, (a,), lambda g: (g * c,))


def relu(a):
    av = _values(a)
    mask = av > 0.0
    tape = _tape_of(a)
    return _emit(tape, av * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    av = _values(a)
    mask = av > 0.0
    factor = np.where(mask, 1.0, slope)
    tape = _tape_of(a)
    return _emit(tape, av * factor, (a,), lambda g: (g * factor,))


def exp(a):
    av = _values(a)
    out = np.exp(av)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError("exp overflow")
    tape = _tape_of(a)
    return _emit(tape, out, (a,), lambda g: (g * out,))


def log(a):
    av = _values(a)
    if np.any(av <= 0.0):
        raise NumericDomainError("log of non-positive value")
    tape = _tape_of(a)
    return _emit(tape, np.log(av), (a,), lambda g: (g / av,))


def powc(a, p):
    """Elementwise a**p for constant p; base must be non-negative."""
    av = _values(a)
    p = float(p)
    if np.any(av < 0.0):
        raise NumericDomainError("powc base must be non-negative")
    out = av ** p
    tape = _tape_of(a)

    def bwd(g):
        # derivative p*a**(p-1); guard a=0 with p<1 against inf
        base = np.maximum(av, 1e-300) if p < 1.0 else av
        return (g * p * base ** (p - 1.0),)

    return _emit(tape, out, (a,), bwd)


def softmax_rows(a):
    av = _values(a)
    if av.ndim != 2:
        raise ShapeError("softmax_rows expects a 2D array")
    shifted = av - np.max(av, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=1, keepdims=True)
    tape = _tape_of(a)

    def bwd(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _emit(tape, s, (a,), bwd)


def concat(tensors, axis=1):
    vals = [_values(t) for t in tensors]
    tape = _tape_of(*tensors)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(tape, np.concatenate(vals, axis=axis), tuple(tensors), bwd)


def gather_rows(a, idx):
    av = _values(a)
    idx = np.asarray(idx, dtype=np.int64)
    tape = _tape_of(a)
    n = av.shape[0]

    def bwd(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError("gather index out of range")
    return _emit(tape, av[idx], (a,), bwd)


def scatter_add_rows(a, idx, num_rows):
    """out[idx[e]] += a[e]; the exact adjoint of gather_rows."""
    av = _values(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != av.shape[0]:
        raise ShapeError("scatter index count must match row count")
    out = np.zeros((num_rows,) + av.shape[1:], dtype=np.float64)
    np.add.at(out, idx, av)
    tape = _tape_of(a)
    return _emit(tape, out, (a,), lambda g: (g[idx],))


def _segment_reduce_sum(values, seg_ptr):
    counts = np.diff(seg_ptr)
    if values.shape[0] and np.all(counts > 0):
        return np.add.reduceat(values, seg_ptr[:-1], axis=0)
    # cumsum difference handles empty segments (reduceat does not)
    cs = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    return cs[seg_ptr[1:]] - cs[seg_ptr[:-1]]


def segment_sum(a, seg_ptr):
    """Sum contiguous row segments. seg_ptr has length S+1 (cumulative row offsets).

    Rows must already be grouped by segment; empty segments yield zero rows.
    This is the fast path used for per-node aggregation over sorted edge lists.
    """
    av = _values(a)
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    if seg_ptr[-1] != av.shape[0]:
        raise ShapeError("segment pointer does not cover all rows")
    counts = np.diff(seg_ptr)
    tape = _tape_of(a)

    def bwd(g):
        return (np.repeat(g, counts, axis=0),)

    return _emit(tape, _segment_reduce_sum(av, seg_ptr), (a,), bwd)


def segment_softmax(a, seg_ptr):
    """Softmax within contiguous row segments (every segment must be non-empty)."""
    av = _values(a)
    seg_ptr = np.asarray(seg_ptr, dtype=np.int64)
    counts = np.diff(seg_ptr)
    if np.any(counts <= 0):
        raise ContractError("segment_softmax segments must be non-empty")
    if seg_ptr[-1] != av.shape[0]:
        raise ShapeError("segment pointer does not cover all rows")
    seg_max = np.maximum.reduceat(av, seg_ptr[:-1], axis=0)
    e = np.exp(av - np.repeat(seg_max, counts, axis=0))
    denom = np.repeat(_segment_reduce_sum(e, seg_ptr), counts, axis=0)
    s = e / denom
    tape = _tape_of(a)

    def bwd(g):
        inner = _segment_reduce_sum(g * s, seg_ptr)
        return (s * (g - np.repeat(inner, counts, axis=0)),)

    return _emit(tape, s, (a,), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    av = _values(a)
    tape = _tape_of(a)

    def bwd(g):
        if axis is None:
            return (np.full_like(av, float(np.asarray(g).reshape(()))),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return _emit(tape, np.sum(av, axis=axis, keepdims=keepdims), (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    av = _values(a)
    n = av.size if axis is None else av.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dropout_mask(a, keep_prob, rng):
    """Multiply by a seeded Bernoulli(keep_prob)/keep_prob mask.

    The same primitive serves training dropout and MC-dropout inference.
    """
    keep_prob = float(keep_prob)
    if not 0.0 < keep_prob <= 1.0:
        raise ContractError(f"keep probability must be in (0, 1], got {keep_prob}")
    av = _values(a)
    mask = (rng.random(av.shape) < keep_prob) / keep_prob
    tape = _tape_of(a)
    return _emit(tape, av * mask, (a,), lambda g: (g * mask,))


def layernorm_rows(a, gain, bias, eps=1e-5):
    """Per-row layer normalization with learnable gain/bias vectors."""
    av, gv, bv = _values(a), _values(gain), _values(bias)
    if av.ndim != 2 or gv.shape != (av.shape[1],) or bv.shape != (av.shape[1],):
        raise ShapeError("layernorm_rows expects (N,D) input with (D,) gain and bias")
    mu = np.mean(av, axis=1, keepdims=True)
    var = np.var(av, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv
    out = xhat * gv + bv
    tape = _tape_of(a, gain, bias)
    d = av.shape[1]

    def bwd(g):
        gxhat = g * gv
        gx = inv * (
            gxhat
            - np.mean(gxhat, axis=1, keepdims=True)
            - xhat * np.mean(gxhat * xhat, axis=1, keepdims=True)
        )
        return gx, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    return _emit(tape, out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ModelParams:
    """Ordered named collection of float64 parameter arrays."""

    def __init__(self, arrays=None):
        self._arrays = {}
        if arrays:
            for name, a in arrays.items():
                self._arrays[name] = np.asarray(a, dtype=np.float64)

    def __getitem__(self, name):
        return self._arrays[name]

    def __setitem__(self, name, value):
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self):
        return list(self._arrays)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self._arrays.items()})

    def count(self):
        return int(sum(v.size for v in self._arrays.values()))


class AdamState:
    """Adam moment accumulators plus hyperparameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ContractError("invalid Adam hyperparameters")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {name: np.zeros_like(v) for name, v in params.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.items()}


def adam_step(params, grads, state):
    """One in-place Adam update with bias correction.

    ``grads`` maps parameter names to arrays; missing names are treated as zero.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
