"""Dense reverse-mode autodiff on numpy arrays, plus Adam.

Computation is define-by-run: open a :class:`Tape`, ``watch`` the leaf tensors
whose gradients are wanted, run the forward pass with the functions in this
module, then call :func:`backward`.  Operations whose inputs are not tracked by
the active tape run as plain numpy and record nothing.

    >>> w = Tensor([[2.0]])
    >>> with Tape() as tape:
    ...     tape.watch(w)
    ...     loss = total(mul(w, w))
    >>> backward(loss, [w])[0]
    array([[4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional handle into a differentiation tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, node=None, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.data.shape}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.ops = []  # (out_node, parent_nodes, backward_fn)
        self.n_nodes = 0
        self._leaves = {}  # id(tensor) -> node
        self._watched = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.remove(self)
        for t in self._watched:
            if t.tape is self:
                t.node = None
                t.tape = None
        return False

    def _new_node(self):
        node = self.n_nodes
        self.n_nodes += 1
        return node

    def watch(self, *tensors):
        for t in tensors:
            if isinstance(t, (list, tuple)):
                self.watch(*t)
                continue
            if id(t) in self._leaves:
                continue
            node = self._new_node()
            t.node = node
            t.tape = self
            self._leaves[id(t)] = node
            self._watched.append(t)

    def leaf_node(self, t):
        return self._leaves.get(id(t))


def _record(out, parents, backward_fn):
    """Wrap ``out`` and register it on the active tape if any parent is tracked."""
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    nodes = [p.node if p.tape is tape else None for p in parents]
    if all(n is None for n in nodes):
        return Tensor(out)
    node = tape._new_node()
    tape.ops.append((node, nodes, backward_fn))
    return Tensor(out, node, tape)


def backward(loss, params=()):
    """Gradients of scalar ``loss`` wrt each tensor in ``params``.

    Parameters never reached from ``loss`` get a zero array.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    out = []
    if tape is None:
        return [np.zeros_like(p.data) for p in params]
    grads = {loss.node: np.ones_like(loss.data)}
    for node, parents, fn in reversed(tape.ops):
        g = grads.pop(node, None)
        if g is None:
            continue
        for pnode, pg in zip(parents, fn(g)):
            if pnode is None or pg is None:
                continue
            prev = grads.get(pnode)
            grads[pnode] = pg if prev is None else prev + pg
    for p in params:
        node = tape.leaf_node(p)
        g = grads.get(node) if node is not None else None
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
    return out


def _require_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _require_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    """Multiply by a constant python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def scale_by(a, s):
    """Multiply ``a`` by a one-element tensor ``s`` (learnable scalar)."""
    a, s = as_tensor(a), as_tensor(s)
    if s.data.size != 1:
        raise DimensionError(f"scale_by: scalar factor has shape {s.shape}")
    ad, sv = a.data, s.data.reshape(()).item()
    sshape = s.shape
    return _record(ad * sv, (a, s),
                   lambda g: (g * sv, np.array(np.sum(g * ad)).reshape(sshape)))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def total(a):
    """Sum of all entries as a 0-d tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g.item()),))


# --- linear algebra ---------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _tracked(t):
    tape = active_tape()
    return tape is not None and t.tape is tape


def linear(x, w, b=None):
    """``x @ w + b`` with the bias row broadcast over rows."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    xd, wd = x.data, w.data
    need_x = _tracked(x)

    if b is None:
        return _record(xd @ wd, (x, w),
                       lambda g: (g @ wd.T if need_x else None, xd.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    out = xd @ wd
    out += b.data
    return _record(out, (x, w, b),
                   lambda g: (g @ wd.T if need_x else None, xd.T @ g, g.sum(axis=0)))


def add_bias(x, b):
    """Add the vector ``b`` to every row of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {b.shape} for rows of {x.shape}")
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def row_slice(w, start, stop):
    """Rows ``start:stop`` of a matrix, e.g. one input block of a weight."""
    w = as_tensor(w)
    shape = w.shape

    def fn(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _record(w.data[start:stop], (w,), fn)


def concat_cols(*ts):
    ts = [as_tensor(t) for t in ts]
    rows = {t.shape[0] for t in ts}
    if len(rows) != 1 or any(t.data.ndim != 2 for t in ts):
        raise DimensionError(f"concat_cols: row counts differ {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _record(np.concatenate([t.data for t in ts], axis=1), ts, fn)


def sparse_apply(m, x):
    """``m @ x`` for a constant sparse (or dense) matrix ``m``."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_apply: matrix {m.shape} vs rows {x.shape}")
    mt = m.T.tocsr() if sp.issparse(m) else m.T
    out = m @ x.data
    return _record(np.asarray(out), (x,), lambda g: (np.asarray(mt @ g),))


def mul_rows(x, w):
    """Scale row i of ``x`` by constant ``w[i]``."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != x.shape[0]:
        raise DimensionError(f"mul_rows: {w.shape[0]} weights for {x.shape[0]} rows")
    return _record(x.data * w, (x,), lambda g: (g * w,))


# --- graph primitives -------------------------------------------------------

@dataclass(frozen=True)
class Segments:
    """Precomputed scatter structure for a fixed index list."""

    index: np.ndarray
    n_rows: int
    matrix: sp.csr_matrix = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, index, n_rows):
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        if index.size and (index.min() < 0 or index.max() >= n_rows):
            raise IndexError(f"segment index out of range for {n_rows} rows")
        m = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                          shape=(n_rows, index.size))
        counts = np.bincount(index, minlength=n_rows).astype(np.float64)
        return cls(index, int(n_rows), m, counts)


def _segments(index, n_rows):
    if isinstance(index, Segments):
        if n_rows is not None and n_rows != index.n_rows:
            raise DimensionError(f"segments built for {index.n_rows} rows, asked for {n_rows}")
        return index
    return Segments.build(index, n_rows)


def gather_rows(x, index):
    """Rows ``x[index]``; backward scatters into the source rows."""
    x = as_tensor(x)
    seg = _segments(index, x.shape[0])
    idx, m = seg.index, seg.matrix
    return _record(x.data[idx], (x,), lambda g: (np.asarray(m @ g),))


def segment_sum(messages, targets, n_rows=None):
    messages = as_tensor(messages)
    seg = _segments(targets, n_rows)
    if seg.index.size != messages.shape[0]:
        raise DimensionError(f"segment_sum: {seg.index.size} targets for {messages.shape[0]} rows")
    idx, m = seg.index, seg.matrix
    if messages.data.ndim == 1:
        out = np.asarray(m @ messages.data)
    else:
        out = np.asarray(m @ messages.data).reshape(seg.n_rows, *messages.shape[1:])
    return _record(out, (messages,), lambda g: (g[idx],))


def segment_mean(messages, targets, n_rows=None):
    seg = _segments(targets, n_rows)
    inv = 1.0 / np.maximum(seg.counts, 1.0)
    return mul_rows(segment_sum(messages, seg), inv)


def center_rows(x):
    """Subtract the column means from every row."""
    x = as_tensor(x)
    if x.shape[0] < 1:
        raise ContractError("center_rows needs at least one row")
    return _record(x.data - x.data.mean(axis=0), (x,), lambda g: (g - g.mean(axis=0),))


def mse(pred, target, weights=None):
    """Mean of (optionally column-weighted) squared differences."""
    pred, target = as_tensor(pred), as_tensor(target)
    _require_same(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size
    if weights is None:
        w = 1.0
    else:
        w = np.asarray(weights, dtype=np.float64)
        if diff.ndim != 2 or w.shape != (diff.shape[1],):
            raise DimensionError(f"mse: weights {w.shape} for residual {diff.shape}")
    wd = w * diff
    value = np.array(np.sum(wd * diff) / n)

    def fn(g):
        d = (2.0 * g.item() / n) * wd
        return d, -d

    return _record(value, (pred, target), fn)


# --- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads, state: AdamState):
    """In-place bias-corrected Adam update of ``params``; returns ``state``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("adam_step: params, grads and state lengths differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == np.shape(g) == m.shape == v.shape):
            raise DimensionError(f"adam_step: shape mismatch {p.shape} vs {np.shape(g)}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --- checking ---------------------------------------------------------------

def numeric_gradient(fn: Callable[[], float], param: Tensor, h=1e-6):
    """Central finite differences of ``fn()`` wrt every entry of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def gradcheck(loss_fn, params, h=1e-6, floor=1e-4):
    """Largest relative error between tape and finite-difference gradients.

    ``loss_fn`` builds the scalar loss from the current parameter values.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    with Tape() as tape:
        tape.watch(params)
        loss = loss_fn()
        analytic = backward(loss, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_gradient(lambda: float(loss_fn().data), p, h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
