"""LipschitzNorm score normalizations and closed-form Lipschitz bounds.

The normalizations divide raw attention scores by a scalar built from the
query norm and the largest input norm, which caps every score by ``alpha``
and makes the attention layer Lipschitz with a constant that only depends
on the shape ``(m, n)``.

Norm conventions (rows are indexed by the first axis):

* ``two_inf(M)``: 2-norm of the vector of per-row max-abs entries.
* ``input_norm(X)``: largest column 2-norm of ``X``, i.e. ``||X^T||_(inf,2)``,
  the largest input vector norm.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Var

__all__ = [
    "LipNormKind",
    "BoundReportRow",
    "input_norm",
    "two_inf_norm",
    "lipnorm_linear",
    "lipnorm_transformer",
    "lipnorm_generic",
    "LipschitzLinearScore",
    "LipschitzGenericScore",
    "LipschitzQuadraticScore",
    "gat_edge_score",
    "theoretical_bound",
    "multihead_bound",
    "composition_bound",
    "check_thm2_assumptions",
    "jacobian_row_max_bound",
]


class LipNormKind(str, enum.Enum):
    GENERIC = "generic_lipschitz"
    LINEAR = "linear"
    TRANSFORMER = "transformer"
    GAT_EDGE = "gat_edge"


@dataclass
class BoundReportRow:
    kind: str
    m: int
    n: int
    alpha: float
    theoretical: float
    empirical: float
    samples: int

    @property
    def satisfied(self) -> bool:
        return self.empirical <= self.theoretical * (1.0 + 1e-9)


def _abs(x):
    if isinstance(x, Var):
        return T.maximum(x, -x)
    return np.abs(x)


def input_norm(X):
    """``||X^T||_(inf,2)``: the largest column 2-norm of ``X``."""
    return T.sqrt((X * X).sum(axis=0).max())


def frobenius(M):
    return T.sqrt((M * M).sum())


def two_inf_norm(M):
    """``||M||_(2,inf)``: 2-norm over rows of the per-row max-abs entry."""
    return T.sqrt((_abs(M).max(axis=1) ** 2).sum())


def _safe_divide(scores, denom, with_flag):
    degenerate = float(T.value_of(denom)) == 0.0
    if degenerate:
        out = np.zeros(T.value_of(scores).shape)
        if isinstance(scores, Var):
            out = scores.tape.const(out)
    else:
        out = scores / denom
    return (out, degenerate) if with_flag else out


def lipnorm_linear(Q, X, with_flag: bool = False):
    """``Q^T X / (||Q||_F ||X^T||_(inf,2))``; every entry lies in ``[-1, 1]``.

    A zero query or an all-zero input gives all-zero scores, flagged degenerate.
    """
    scores = Q.T @ X
    return _safe_divide(scores, frobenius(Q) * input_norm(X), with_flag)


def lipnorm_transformer(Q, K, V, with_flag: bool = False):
    """``Q^T K / max{uv, uw, vw}`` with ``u=||Q||_F``, ``v, w`` the largest key/value norms."""
    u = frobenius(Q)
    v = input_norm(K)
    w = input_norm(V)
    denom = T.maximum(T.maximum(u * v, u * w), v * w)
    return _safe_divide(Q.T @ K, denom, with_flag)


def lipnorm_generic(g_tilde: Callable, X, L: float, alpha: float = 1.0, with_flag: bool = False):
    """``alpha g(X) / max{||g(X)||_(2,inf), ||X^T||_(inf,2) L}`` for a Lipschitz score ``g``.

    ``L`` must upper-bound the Lipschitz constant of ``g`` from Frobenius to
    the (2,inf) norm.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    s = g_tilde(X)
    denom = T.maximum(two_inf_norm(s), input_norm(X) * L)
    return _safe_divide(s * alpha, denom, with_flag)


@dataclass
class LipschitzLinearScore:
    """Score function wrapper applying :func:`lipnorm_linear`."""

    Q: np.ndarray

    def __call__(self, X):
        return lipnorm_linear(self.Q, X)


@dataclass
class LipschitzGenericScore:
    g_tilde: Callable
    L: float
    alpha: float = 1.0

    def __call__(self, X):
        return lipnorm_generic(self.g_tilde, X, self.L, self.alpha)


@dataclass
class LipschitzQuadraticScore:
    """Transformer score on stacked ``X = (Q || K || V)``, normalized by :func:`lipnorm_transformer`."""

    d: int

    def split(self, X):
        d = self.d
        return X[:d], X[d : 2 * d], X[2 * d : 3 * d]

    def __call__(self, X):
        return lipnorm_transformer(*self.split(X))

    def values(self, X):
        return self.split(X)[2]


def gat_edge_score(a_i, a_j, x_i, x_j, max_neighbor_norm: float) -> float:
    """Normalized GAT edge score.

    ``(<a_i,x_i> + <a_j,x_j>) / sqrt((|a_i|^2 + |a_j|^2)(max_neighbor_norm^2 + |x_i|^2))``,
    which is the concatenated score ``<(a_i|a_j), (x_i|x_j)>`` divided by
    ``|(a_i|a_j)|`` times the largest concatenated input norm over the
    neighborhood. Returns 0 when the denominator vanishes.
    """
    a_i, a_j, x_i, x_j = (np.asarray(v, dtype=np.float64) for v in (a_i, a_j, x_i, x_j))
    num = float(a_i @ x_i + a_j @ x_j)
    den2 = (a_i @ a_i + a_j @ a_j) * (max_neighbor_norm**2 + x_i @ x_i)
    if den2 <= 0.0:
        return 0.0
    return num / math.sqrt(den2)


def theoretical_bound(
    kind: str,
    m: int = 1,
    n: int = 1,
    alpha: float = 1.0,
    v_norm: float | None = None,
) -> float:
    """Closed-form Lipschitz bound of a normalized attention layer.

    kinds: ``general`` / ``generic_lipschitz`` (any alpha), ``linear``,
    ``transformer``, and ``draft_single_output`` which needs ``v_norm`` and
    ``n`` and gives ``1/sqrt(1 + (n-1) exp(-2|v|)) + 4|v|``.
    """
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    ratio = math.sqrt(m / n)
    if kind in ("general", "generic_lipschitz", LipNormKind.GENERIC):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        return math.exp(alpha) * ratio + alpha * math.sqrt(8.0)
    if kind in ("linear", LipNormKind.LINEAR):
        return math.e * ratio + math.sqrt(8.0)
    if kind in ("transformer", LipNormKind.TRANSFORMER):
        return math.exp(math.sqrt(3.0)) * ratio + 2.0 * math.sqrt(6.0)
    if kind == "draft_single_output":
        if v_norm is None:
            raise ValueError("draft_single_output needs v_norm")
        return 1.0 / math.sqrt(1.0 + (n - 1) * math.exp(-2.0 * v_norm)) + 4.0 * v_norm
    raise ValueError(f"unknown bound kind {kind!r}")


def multihead_bound(L_att: float, W_O, W_list: Sequence) -> float:
    """``L_att * ||W_O||_2 * sqrt(sum_k ||W_k||_2^2)`` (spectral norms)."""
    head = math.sqrt(sum(T.spectral_norm(W) ** 2 for W in W_list))
    return L_att * T.spectral_norm(W_O) * head


def composition_bound(bounds: Sequence[float]) -> float:
    """Product of per-layer Lipschitz bounds; 1 for an empty stack."""
    out = 1.0
    for b in bounds:
        if b < 0:
            raise ValueError("layer bounds must be non-negative")
        out *= b
    return out


def _jacobian(fn: Callable, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tape = T.Tape()
    x = tape.leaf(X)
    out = fn(x)
    if not isinstance(out, Var) or not out.requires_grad:
        val = T.value_of(out)
        return val, np.zeros((val.size, X.size))
    val = out.value
    J = np.empty((val.size, X.size))
    for k in range(val.size):
        seed = np.zeros(val.size)
        seed[k] = 1.0
        J[k] = T.vjp(tape, out, seed.reshape(val.shape))[0].reshape(-1)
    return val, J


def jacobian_row_max_bound(J: np.ndarray, out_shape: tuple) -> float:
    """Upper bound on the Frobenius -> (2,inf) operator norm from a flattened Jacobian.

    ``|Dg(H)|_(2,inf)^2 = sum_i max_j <J_ij, h>^2 <= |h|^2 sum_i max_j |J_ij|^2``.
    Exact for linear scores ``Q^T X``, where it equals ``||Q||_F``.
    """
    rows = np.sum(J * J, axis=1).reshape(out_shape)
    return float(np.sqrt(np.sum(rows.max(axis=1))))


def check_thm2_assumptions(
    g_tilde: Callable,
    c: Callable,
    X,
    alpha: float = 1.0,
    dc_bound: float | None = None,
    rtol: float = 1e-9,
) -> dict:
    """Evaluate the three sufficient conditions for the general Lipschitz bound at ``X``.

    ``g_tilde`` and ``c`` must be tape-traceable. Condition (2) uses
    :func:`jacobian_row_max_bound` on the autodiff Jacobian of ``g_tilde``;
    condition (3) uses ``dc_bound`` when given, otherwise the norm of the
    autodiff (sub)gradient of ``c`` at ``X``. Ties in ``max`` terms of ``c``
    resolve to one maximizer, which is a valid subgradient.
    """
    X = np.asarray(X, dtype=np.float64)
    cx = float(T.value_of(c(X)))
    if cx <= 0.0:
        return {"degenerate": True, "bounded_scores": False, "score_gradient": False, "normalizer_gradient": False}
    g_val, J = _jacobian(g_tilde, X)
    g_val = np.atleast_2d(g_val)
    x_norm = float(input_norm(X))
    if dc_bound is None:
        tape = T.Tape()
        x = tape.leaf(X)
        cv = c(x)
        if isinstance(cv, Var) and cv.requires_grad:
            dc_bound = float(np.linalg.norm(T.backward(tape, cv)[0]))
        else:
            dc_bound = 0.0
    slack = 1.0 + rtol
    cond1 = float(np.max(np.abs(g_val))) <= alpha * cx * slack
    cond2 = x_norm * jacobian_row_max_bound(J, g_val.shape) <= alpha * cx * slack
    cond3 = x_norm * dc_bound * float(two_inf_norm(g_val)) <= alpha * cx * cx * slack
    return {
        "degenerate": False,
        "bounded_scores": bool(cond1),
        "score_gradient": bool(cond2),
        "normalizer_gradient": bool(cond3),
    }
