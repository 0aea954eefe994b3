"""Dense matrix norms, a small reverse-mode autodiff tape, and finite differences.

Every array is float64. The tape records primitive operations in execution
order, so a reverse sweep over ``tape.nodes`` is a valid topological order.

Most op functions below accept either a plain ``ndarray`` or a :class:`Var`.
Plain arrays are evaluated eagerly with numpy; ``Var`` inputs are recorded on
their tape. That lets the attention and graph code run identically in fast
numpy sweeps and inside gradient computations.
"""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NormKind",
    "matrix_norm",
    "spectral_norm",
    "power_iteration",
    "Tape",
    "Var",
    "backward",
    "vjp",
    "finite_diff_jacobian",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "relu",
    "leaky_relu",
    "tanh",
    "elu",
    "softmax",
    "concat",
    "maximum",
    "segment_sum",
    "segment_max",
    "segment_softmax",
    "scatter_add",
    "stop_gradient",
    "value_of",
]


# ----------------------------------------------------------------------------
# norms
# ----------------------------------------------------------------------------


class NormKind(str, enum.Enum):
    FROBENIUS = "frobenius"
    SPECTRAL = "spectral"
    INF_2 = "inf_2"
    TWO_INF = "two_inf"


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    tol: float = 1e-8,
    max_iter: int = 1000,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a symmetric PSD operator given as ``matvec``.

    Starts from a seeded Gaussian vector. If the iterate collapses to zero
    (start vector orthogonal to the range) or stalls without converging, it
    restarts once from a fresh seed and keeps the larger Rayleigh quotient.
    """
    best = 0.0
    for attempt in range(2):
        rng = np.random.default_rng(seed + 7919 * attempt)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        converged = False
        for _ in range(max_iter):
            w = matvec(v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            new_lam = float(v @ w)
            v = w / nw
            if abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300):
                lam = new_lam
                converged = True
                break
            lam = new_lam
        best = max(best, lam)
        if converged and lam > 0.0:
            break
    return best


def spectral_norm(M: np.ndarray, tol: float = 1e-8, max_iter: int = 1000, seed: int = 0) -> float:
    """Largest singular value via power iteration on the Gram matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[0] < M.shape[1]:
        G = M @ M.T
    else:
        G = M.T @ M
    lam = power_iteration(lambda v: G @ v, G.shape[0], tol=tol, max_iter=max_iter, seed=seed)
    return float(np.sqrt(max(lam, 0.0)))


def matrix_norm(M, kind: NormKind | str = NormKind.FROBENIUS) -> float:
    """Frobenius, spectral, (inf,2) or (2,inf) norm of a 2-D array.

    ``inf_2`` is the largest row 2-norm; ``two_inf`` is the 2-norm of the
    vector of per-row max-abs entries.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {M.shape}")
    if M.size == 0:
        raise ValueError("norm of an empty matrix is undefined")
    kind = NormKind(kind)
    if kind is NormKind.FROBENIUS:
        return float(np.sqrt(np.sum(M * M)))
    if kind is NormKind.SPECTRAL:
        return spectral_norm(M)
    if kind is NormKind.INF_2:
        return float(np.sqrt(np.max(np.sum(M * M, axis=1))))
    return float(np.sqrt(np.sum(np.max(np.abs(M), axis=1) ** 2)))


# ----------------------------------------------------------------------------
# tape
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of primitive operations.

    ``nodes`` holds every recorded :class:`Var` that depends on a leaf, in
    creation order. ``leaves`` holds the differentiable inputs.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value, name: str | None = None) -> "Var":
        v = Var(self, value, name=name, requires_grad=True)
        v.index = len(self.nodes)
        self.nodes.append(v)
        self.leaves.append(v)
        return v

    def const(self, value) -> "Var":
        return Var(self, value, requires_grad=False)

    def record(self, value, parents: Sequence["Var"], vjp_fn) -> "Var":
        if not any(p.requires_grad for p in parents):
            return Var(self, value, requires_grad=False)
        v = Var(self, value, parents=tuple(parents), vjp_fn=vjp_fn, requires_grad=True)
        v.index = len(self.nodes)
        self.nodes.append(v)
        return v

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        """Drop every recorded node; breaks the tape/Var reference cycle so memory frees at once."""
        self.nodes.clear()
        self.leaves.clear()


class Var:
    """A value on a :class:`Tape`. Supports the numpy arithmetic subset we need."""

    __array_ufunc__ = None

    def __init__(self, tape, value, parents=(), vjp_fn=None, name=None, requires_grad=False):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp_fn = vjp_fn
        self.name = name
        self.requires_grad = requires_grad
        self.index = -1
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -self._lift(other))

    def __rsub__(self, other):
        return add(self._lift(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __pow__(self, p):
        return power(self, float(p))

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return matmul(self._lift(other), self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def stop_gradient(x):
    if isinstance(x, Var):
        return x.tape.const(x.value)
    return x


def vjp(tape: Tape, out: Var, cotangent) -> list[np.ndarray]:
    """Reverse sweep seeded with ``cotangent``; returns one gradient per leaf."""
    grads: dict[int, np.ndarray] = {}
    if out.requires_grad:
        grads[out.index] = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), out.shape).copy()
    for node in reversed(tape.nodes[: out.index + 1] if out.index >= 0 else []):
        if node.vjp_fn is None:
            continue
        g = grads.pop(node.index, None)  # interior cotangents are dropped once consumed
        if g is None:
            continue
        pgrads = node.vjp_fn(g)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p.index in grads:
                grads[p.index] = grads[p.index] + pg
            else:
                grads[p.index] = pg
    result = []
    for leaf in tape.leaves:
        g = grads.get(leaf.index)
        if g is None:
            g = np.zeros_like(leaf.value)
        leaf.grad = g
        result.append(g)
    return result


def backward(tape: Tape, loss: Var) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf of ``tape``."""
    if not isinstance(loss, Var):
        raise TypeError("loss must be a Var recorded on the tape")
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    return vjp(tape, loss, np.ones_like(loss.value))


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    sa, sb = a.shape, b.shape
    return a.tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def scale(a: Var, c: float) -> Var:
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def power(a: Var, p: float) -> Var:
    av = a.value
    return a.tape.record(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def _vjp(g):
        ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        gb = av.T @ g if av.ndim == 2 else np.outer(av, g)
        return ga.reshape(av.shape), gb.reshape(bv.shape)

    return a.tape.record(av @ bv, (a, b), _vjp)


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def scatter_add(idx: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``x`` into ``n`` buckets ``idx`` (a sparse product instead of ``np.add.at``)."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=np.float64)
    if idx.size == 0:
        return np.zeros((n,) + x.shape[1:])
    flat = x.reshape(idx.size, -1)
    P = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    return np.asarray(P @ flat).reshape((n,) + x.shape[1:])


def _is_row_index(idx) -> bool:
    return isinstance(idx, np.ndarray) and idx.dtype.kind in "iu" and idx.ndim == 1


def take(a: Var, idx) -> Var:
    """Indexing / row gather. Repeated indices accumulate in the backward pass."""
    old = a.shape

    def _vjp(g):
        if _is_row_index(idx):
            return (scatter_add(idx, g, old[0]),)
        out = np.zeros(old)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx], (a,), _vjp)


def reduce_sum(a: Var, axis=None, keepdims=False) -> Var:
    old = a.shape

    def _vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, old).copy(),)

    return a.tape.record(a.value.sum(axis=axis, keepdims=keepdims), (a,), _vjp)


def reduce_max(a: Var, axis=None, keepdims=False) -> Var:
    """Max-reduce. The subgradient goes to the first maximizer on ties."""
    av = a.value
    out = av.max(axis=axis, keepdims=True)
    if axis is None:
        mask = np.zeros(av.size)
        mask[np.argmax(av)] = 1.0
        mask = mask.reshape(av.shape)
    else:
        arg = np.expand_dims(np.argmax(av, axis=axis), axis)
        mask = np.zeros_like(av)
        np.put_along_axis(mask, arg, 1.0, axis=axis)

    def _vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    value = out if keepdims else (out.reshape(()) if axis is None else np.squeeze(out, axis))
    return a.tape.record(value, (a,), _vjp)


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    out = np.exp(x.value)
    return x.tape.record(out, (x,), lambda g: (g * out,))


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    xv = x.value
    return x.tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return x.tape.record(out, (x,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


def _sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if not isinstance(x, Var):
        return _sigmoid_np(x)
    out = _sigmoid_np(x.value)
    return x.tape.record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    if not isinstance(x, Var):
        return np.maximum(x, 0.0)
    mask = (x.value > 0).astype(np.float64)
    return x.tape.record(x.value * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2):
    if not isinstance(x, Var):
        return np.where(x > 0, x, slope * x)
    d = np.where(x.value > 0, 1.0, slope)
    return x.tape.record(x.value * d, (x,), lambda g: (g * d,))


def elu(x):
    if not isinstance(x, Var):
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    d = np.where(xv > 0, 1.0, neg + 1.0)
    return x.tape.record(np.where(xv > 0, xv, neg), (x,), lambda g: (g * d,))


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    out = np.tanh(x.value)
    return x.tape.record(out, (x,), lambda g: (g * (1.0 - out * out),))


def _softmax_np(M, axis=-1):
    M = np.asarray(M, dtype=np.float64)
    z = np.exp(M - M.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1):
    """Max-shifted softmax along ``axis`` (rows by default)."""
    if not isinstance(x, Var):
        return _softmax_np(x, axis)
    s = _softmax_np(x.value, axis)
    return x.tape.record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def concat(xs: Sequence, axis: int = 0):
    if not any(isinstance(x, Var) for x in xs):
        return np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=axis)
    tape = next(x.tape for x in xs if isinstance(x, Var))
    vs = [x if isinstance(x, Var) else tape.const(x) for x in xs]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([v.value for v in vs], axis=axis)
    return tape.record(out, vs, lambda g: tuple(np.split(g, cuts, axis=axis)))


def maximum(a, b):
    """Elementwise max. On ties the gradient goes to ``a``."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return np.maximum(a, b)
    tape = a.tape if isinstance(a, Var) else b.tape
    a = a if isinstance(a, Var) else tape.const(a)
    b = b if isinstance(b, Var) else tape.const(b)
    pick = (a.value >= b.value).astype(np.float64)
    return tape.record(
        np.maximum(a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * (1.0 - pick), b.shape)),
    )


def _segment_sum_np(x, seg, n):
    return scatter_add(seg, x, n)


def segment_sum(x, seg: np.ndarray, n: int):
    """Sum rows of ``x`` into ``n`` buckets given by ``seg``."""
    if not isinstance(x, Var):
        return _segment_sum_np(np.asarray(x, dtype=np.float64), seg, n)
    return x.tape.record(_segment_sum_np(x.value, seg, n), (x,), lambda g: (g[seg],))


def _segment_max_np(x, seg, n):
    out = np.full((n,) + np.shape(x)[1:], -np.inf)
    seg = np.asarray(seg, dtype=np.int64)
    if seg.size and np.all(seg[1:] >= seg[:-1]):
        # sorted buckets (CSR order): one reduceat over the run starts
        starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
        out[seg[starts]] = np.maximum.reduceat(x, starts, axis=0)
    else:
        np.maximum.at(out, seg, x)
    return out


def segment_max(x, seg: np.ndarray, n: int):
    """Per-bucket max (empty buckets give ``-inf``). Gradient goes to every tied maximizer."""
    if not isinstance(x, Var):
        return _segment_max_np(np.asarray(x, dtype=np.float64), seg, n)
    out = _segment_max_np(x.value, seg, n)
    hit = (x.value == out[seg]).astype(np.float64)
    count = _segment_sum_np(hit, seg, n)
    share = hit / np.maximum(count[seg], 1.0)

    def _vjp(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (share * g[seg],)

    return x.tape.record(out, (x,), _vjp)


def _segment_softmax_np(x, seg, n):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return x.copy()
    m = _segment_max_np(x, seg, n)
    z = np.exp(x - m[seg])
    return z / _segment_sum_np(z, seg, n)[seg]


def segment_softmax(x, seg: np.ndarray, n: int):
    """Softmax of ``x`` within each bucket of ``seg`` (extra axes treated independently)."""
    if not isinstance(x, Var):
        return _segment_softmax_np(x, seg, n)
    p = _segment_softmax_np(x.value, seg, n)

    def _vjp(g):
        inner = _segment_sum_np(g * p, seg, n)
        return (p * (g - inner[seg]),)

    return x.tape.record(p, (x,), _vjp)


# ----------------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------------


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], X, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``X``.

    Returns an array of shape ``(f(X).size, X.size)`` over row-major flattened
    inputs and outputs.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    X = np.asarray(X, dtype=np.float64)
    f0 = np.asarray(f(X), dtype=np.float64)
    J = np.empty((f0.size, X.size))
    flat = X.reshape(-1)
    for k in range(X.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] += step
        xm[k] -= step
        fp = np.asarray(f(xp.reshape(X.shape)), dtype=np.float64).reshape(-1)
        fm = np.asarray(f(xm.reshape(X.shape)), dtype=np.float64).reshape(-1)
        J[:, k] = (fp - fm) / (2.0 * step)
    return J
