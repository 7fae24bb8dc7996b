"""Dense f64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: every primitive computes its value with
numpy and, when a :class:`Tape` is active and at least one input is tracked,
records a closure that maps the output cotangent to input cotangents.
``backward`` replays the tape in reverse recording order.

Elementwise primitives follow numpy broadcasting; gradients are summed back
onto the broadcast axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError, ParameterError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "make_rng",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "power",
    "gelu",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "broadcast_to",
    "softmax_rows",
    "cross_entropy",
    "layer_norm",
    "stop_gradient",
    "backward",
    "grad_check",
    "orthogonal_init",
]

_TAPES: list["Tape"] = []


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; streams are reproducible across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the ``with`` block
    on tracked tensors are appended to ``nodes``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.node_id: int | None = None
        self._tape: Tape | None = None

    # shape & values --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the entries."""
        return self.data.reshape(-1)

    @property
    def grad_tracked(self) -> bool:
        return self.requires_grad

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, tracked={self.requires_grad}{tag})"

    # operators -------------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_scalar():
    raise ContractError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(value).all():
        raise NumericError("non-finite value produced")
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        tape = _TAPES[-1]
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        out._tape = tape
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if (ad <= 0).any():
        raise NumericError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# reductions & shape ----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if len(ts) == 1:
        return ts[0]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        z = np.zeros(shape)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(np.array(a.data[idx]), (a,), bw)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may have any integer shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (z,)

    return _make(table.data[ids], (table,), bw)


def stop_gradient(a) -> Tensor:
    """Same value, detached from the tape."""
    return Tensor(as_tensor(a).data)


# linear algebra & fused primitives ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    """Softmax along the last axis of ``x / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / temperature,)

    return _make(p, (x,), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) labels, got {z.shape}, {labels.shape}")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - z[rows, labels])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / z.shape[0]),)

    return _make(np.asarray(loss), (logits,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def bw(g):
        dxhat = g * gamma.data
        dx = None
        if x.requires_grad:
            dx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        dg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        db = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return dx, dg, db

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# differentiation -------------------------------------------------------------


class Gradients:
    """Map from tracked tensors to their accumulated cotangents."""

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _acc(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._store:
            self._store[key] = (t, self._store[key][1] + g)
        else:
            self._store[key] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._store.get(id(t))
        if hit is None:
            if not t.requires_grad:
                raise KeyError(f"{t!r} is not tracked")
            return np.zeros(t.shape)
        return hit[1]

    def get(self, t: Tensor, default=None):
        hit = self._store.get(id(t))
        return default if hit is None else hit[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def leaves(self) -> list[Tensor]:
        return [t for t, _ in self._store.values() if t.node_id is None]


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Reverse sweep from a scalar ``loss``; returns the gradient map."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    grads._acc(loss, np.ones(loss.shape))
    if loss.node_id is None:
        return grads
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not recorded on the given tape")
    store = grads._store
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        hit = store.get(id(node.out))
        if hit is None:
            continue
        pgrads = node.backward(hit[1])
        for parent, pg in zip(node.parents, pgrads):
            if pg is not None and parent.requires_grad:
                grads._acc(parent, pg)
        if node.out is not loss:
            del store[id(node.out)]
    return grads


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max over tracked coordinates of |analytic - central| / max(1, |central|).

    ``f`` must close over ``params`` and be deterministic. Untracked tensors
    are skipped.
    """
    params = [p for p in params if p.requires_grad]
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("non-finite objective during gradient check")
            central = (up - down) / (2 * h)
            err = abs(analytic[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """Orthonormal rows (rows <= cols) or columns (rows > cols) via sign-fixed QR."""
    if rows <= 0 or cols <= 0:
        raise ParameterError(f"orthogonal_init needs positive dims, got {rows}x{cols}")
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return Tensor(q.T.copy() if rows < cols else q)
