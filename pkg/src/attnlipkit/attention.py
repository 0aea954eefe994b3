"""Attention layers: single-output, general, multi-head, Transformer.

Inputs follow the column convention: ``X`` is ``d x n`` with one input vector
per column, score matrices are ``m x n`` and outputs are ``d x m``.
All functions accept numpy arrays or tape ``Var`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Var

__all__ = [
    "AttentionOutput",
    "LinearScore",
    "QuadraticScore",
    "CustomScore",
    "softmax_rows",
    "attention",
    "multi_head",
    "transformer_attention",
    "softmax_jacobian",
    "softmax_directional",
    "chi2_divergence",
    "softmax_frobenius_via_chi2",
]

FLUSH_BELOW = 1e-300


@dataclass
class AttentionOutput:
    output: np.ndarray
    weights: np.ndarray
    scores: np.ndarray


@dataclass
class LinearScore:
    """``g(X) = Q^T X`` with a learned query matrix ``Q`` of shape ``d x m``."""

    Q: np.ndarray

    def __call__(self, X):
        return self.Q.T @ X


@dataclass
class QuadraticScore:
    """Transformer score ``Q^T K / sqrt(d)`` where ``X`` stacks ``(Q || K || V)`` by rows."""

    d: int

    def split(self, X):
        d = self.d
        return X[:d], X[d : 2 * d], X[2 * d : 3 * d]

    def __call__(self, X):
        Q, K, _ = self.split(X)
        return (Q.T @ K) / np.sqrt(self.d)

    def values(self, X):
        return self.split(X)[2]


@dataclass
class CustomScore:
    fn: Callable

    def __call__(self, X):
        return self.fn(X)


def softmax_rows(M):
    """Row-wise softmax with max shift; entries below 1e-300 are flushed to zero."""
    if isinstance(M, Var):
        return T.softmax(M, axis=-1)
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        raise ValueError("softmax of an empty matrix")
    S = T.softmax(np.atleast_2d(M), axis=-1)
    if np.any(S < FLUSH_BELOW):
        S = np.where(S < FLUSH_BELOW, 0.0, S)
        S /= S.sum(axis=1, keepdims=True)
    return S.reshape(M.shape)


def attention(X, g: Callable, value: Callable | None = None) -> AttentionOutput:
    """``value(X) @ softmax(g(X))^T``; ``value`` defaults to the identity."""
    scores = g(X)
    n = X.shape[1]
    if scores.ndim != 2 or scores.shape[1] != n:
        raise ValueError(f"score matrix shape {scores.shape} does not match {n} inputs")
    W = softmax_rows(scores)
    V = X if value is None else value(X)
    return AttentionOutput(output=V @ W.T, weights=W, scores=scores)


def _head_output(result):
    return result.output if isinstance(result, AttentionOutput) else result


def multi_head(X, W_list: Sequence, W_O, inner) -> np.ndarray:
    """``W_O (Att_1(W_1 X) || ... || Att_h(W_h X))`` with row-wise concatenation.

    ``inner`` is a single attention callable shared by all heads, or one per head.
    Each ``W_k`` is ``d x d_in``.
    """
    if len(W_list) == 0:
        raise ValueError("need at least one head")
    d = W_list[0].shape[0]
    if any(W.shape != W_list[0].shape for W in W_list):
        raise ValueError("all head projections must have the same shape")
    if W_O.shape[1] != d * len(W_list):
        raise ValueError(f"W_O has {W_O.shape[1]} columns, expected {d * len(W_list)}")
    heads = inner if isinstance(inner, (list, tuple)) else [inner] * len(W_list)
    if len(heads) != len(W_list):
        raise ValueError("one inner attention per head expected")
    outs = [_head_output(att(W @ X)) for att, W in zip(heads, W_list)]
    return W_O @ T.concat(outs, axis=0)


def transformer_attention(Q, K, V, scale: str = "sqrt_d") -> AttentionOutput:
    """``V softmax(score)^T`` with ``score = Q^T K / sqrt(d)`` or the LipschitzNorm score."""
    if Q.shape != K.shape or K.shape[0] != V.shape[0] or K.shape[1] != V.shape[1]:
        raise ValueError(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if scale == "sqrt_d":
        scores = (Q.T @ K) / np.sqrt(Q.shape[0])
    elif scale == "lipschitz":
        from .lipnorm import lipnorm_transformer

        scores = lipnorm_transformer(Q, K, V)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    W = softmax_rows(scores)
    return AttentionOutput(output=V @ W.T, weights=W, scores=scores)


def softmax_jacobian(x) -> np.ndarray:
    """Closed-form Jacobian ``diag(s) - s s^T`` of softmax at the vector ``x``."""
    s = softmax_rows(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]
    return np.diag(s) - np.outer(s, s)


def softmax_directional(M, H) -> np.ndarray:
    """Derivative of row-softmax at ``M`` in direction ``H`` (closed form, no perturbation)."""
    S = softmax_rows(M)
    H = np.asarray(H, dtype=np.float64)
    return S * (H - np.sum(S * H, axis=1, keepdims=True))


def chi2_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.sum(q * (p / q - 1.0) ** 2))


def softmax_frobenius_via_chi2(M) -> float:
    """``sqrt((m + sum_i chi2(S_i, U_n)) / n)`` for ``S = softmax(M)``."""
    S = softmax_rows(M)
    m, n = S.shape
    u = np.full(n, 1.0 / n)
    total = sum(chi2_divergence(row, u) for row in S)
    return float(np.sqrt((m + total) / n))
