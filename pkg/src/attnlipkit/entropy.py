"""Neighborhood entropy, efficiency, and NeighborNorm calibration.

For a node with neighbor scores ``s`` the attention weights are
``softmax(c * s)``. Their Shannon entropy divided by ``ln N`` (the
*efficiency*) is 1 at ``c = 0`` and non-increasing in ``c >= 0``, so a
bisection on ``c`` reaches any target efficiency above the ``c -> inf``
floor ``ln(#argmax) / ln N``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "CalibrationStatus",
    "CalibrationResult",
    "NeighborhoodScores",
    "entropy_and_efficiency",
    "scaled_efficiency",
    "initial_guess",
    "calibrate_node",
    "calibrate_graph",
    "calibrate_segments",
    "segment_efficiency",
    "W_MAX",
]

W_MAX = 1e6


class CalibrationStatus(str, enum.Enum):
    CONVERGED = "converged"
    DEGENERATE_SINGLETON = "degenerate_singleton"
    DEGENERATE_UNIFORM = "degenerate_uniform"
    TARGET_UNREACHABLE = "target_unreachable"


@dataclass
class NeighborhoodScores:
    node: int
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.size < 1:
            raise ValueError(f"node {self.node}: empty neighborhood")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"node {self.node}: non-finite scores")


@dataclass
class CalibrationResult:
    node: int
    c: float
    achieved_eta: float
    status: CalibrationStatus
    evaluations: int = 0


def _check_target(T: float) -> None:
    if not (0.0 < T <= 1.0):
        raise ValueError(f"target efficiency must lie in (0, 1], got {T}")


def entropy_and_efficiency(p) -> tuple[float, float]:
    """Shannon entropy ``-sum p ln p`` (nats) and efficiency ``H / ln N``.

    A single-element distribution has efficiency 1 by convention.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a non-negative vector summing to 1")
    nz = p[p > 0]
    H = float(-np.sum(nz * np.log(nz)))
    if p.size == 1:
        return H, 1.0
    return H, H / math.log(p.size)


def _efficiency_of_logits(z: np.ndarray) -> float:
    n = z.size
    if n == 1:
        return 1.0
    z = z - z.max()
    lse = math.log(np.sum(np.exp(z)))
    logp = z - lse
    p = np.exp(logp)
    H = -float(np.sum(p * logp))
    return min(max(H / math.log(n), 0.0), 1.0)


def scaled_efficiency(scores, w: float) -> float:
    """Efficiency of ``softmax(w * scores)``."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if w == 0.0:
        return 1.0
    return _efficiency_of_logits(w * s)


def initial_guess(scores, T: float, with_flag: bool = False):
    """Seed ``sqrt(2 (ln N - T ln N) / Var(scores))`` from the second-order entropy expansion.

    Falls back to 1 (flagged) when the scores have zero variance or ``N < 2``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    var = float(np.var(s))
    if s.size < 2 or var <= 0.0:
        return (1.0, True) if with_flag else 1.0
    lnN = math.log(s.size)
    w0 = math.sqrt(max(2.0 * (lnN - T * lnN), 0.0) / var)
    return (w0, False) if with_flag else w0


def _floor(s: np.ndarray) -> float:
    k = int(np.sum(s == s.max()))
    return math.log(k) / math.log(s.size)


def calibrate_node(scores, T: float, tol: float = 1e-6, max_iter: int = 100, node: int = 0) -> CalibrationResult:
    """Find ``c >= 0`` with ``|efficiency(softmax(c s)) - T| <= tol`` by bisection.

    The bracket is grown by doubling from :func:`initial_guess`; ``max_iter``
    caps the total number of efficiency evaluations.
    """
    _check_target(T)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 1:
        return CalibrationResult(node, 1.0, 1.0, CalibrationStatus.DEGENERATE_SINGLETON)
    if np.all(s == s[0]):
        return CalibrationResult(node, 1.0, 1.0, CalibrationStatus.DEGENERATE_UNIFORM)
    if T == 1.0:
        return CalibrationResult(node, 0.0, 1.0, CalibrationStatus.CONVERGED)
    floor = _floor(s)
    if T <= floor:
        eta = scaled_efficiency(s, W_MAX)
        return CalibrationResult(node, W_MAX, eta, CalibrationStatus.TARGET_UNREACHABLE, 1)

    evals = 0

    def eta(w):
        nonlocal evals
        evals += 1
        return scaled_efficiency(s, w)

    lo, hi = 0.0, max(initial_guess(s, T), 1e-6)
    e_hi = eta(hi)
    while e_hi > T + tol and evals < max_iter:
        if hi >= W_MAX:
            return CalibrationResult(node, W_MAX, e_hi, CalibrationStatus.TARGET_UNREACHABLE, evals)
        lo, hi = hi, min(2.0 * hi, W_MAX)
        e_hi = eta(hi)
    if abs(e_hi - T) <= tol:
        return CalibrationResult(node, hi, e_hi, CalibrationStatus.CONVERGED, evals)
    mid, e_mid = hi, e_hi
    while evals < max_iter:
        mid = 0.5 * (lo + hi)
        e_mid = eta(mid)
        if abs(e_mid - T) <= tol:
            return CalibrationResult(node, mid, e_mid, CalibrationStatus.CONVERGED, evals)
        if e_mid > T:
            lo = mid
        else:
            hi = mid
    return CalibrationResult(node, mid, e_mid, CalibrationStatus.TARGET_UNREACHABLE, evals)


def calibrate_graph(
    score_sets: Sequence[NeighborhoodScores], T: float, tol: float = 1e-6, max_iter: int = 100
) -> tuple[list[CalibrationResult], list[NeighborhoodScores]]:
    """Calibrate every neighborhood independently and rescale its scores by ``c_u``."""
    _check_target(T)
    results, scaled = [], []
    for ns in score_sets:
        r = calibrate_node(ns.scores, T, tol=tol, max_iter=max_iter, node=ns.node)
        results.append(r)
        scaled.append(NeighborhoodScores(ns.node, r.c * ns.scores))
    return results, scaled


# ----------------------------------------------------------------------------
# batched ("tensor") bisection over CSR segments
# ----------------------------------------------------------------------------


def segment_efficiency(scores: np.ndarray, seg: np.ndarray, n: int, w: np.ndarray) -> np.ndarray:
    """Efficiency per segment of ``softmax(w[seg] * scores)`` within each segment."""
    z = scores * w[seg]
    zmax = np.full(n, -np.inf)
    np.maximum.at(zmax, seg, z)
    z = z - zmax[seg]
    ez = np.exp(z)
    denom = np.zeros(n)
    np.add.at(denom, seg, ez)
    logp = z - np.log(denom[seg])
    H = np.zeros(n)
    np.add.at(H, seg, -np.exp(logp) * logp)
    size = np.bincount(seg, minlength=n)
    out = np.ones(n)
    big = size >= 2
    out[big] = np.clip(H[big] / np.log(size[big]), 0.0, 1.0)
    return out


_STATUS_CODES = list(CalibrationStatus)


def calibrate_segments(
    scores: np.ndarray, seg: np.ndarray, n: int, T: float, tol: float = 1e-6, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray, list[CalibrationStatus], np.ndarray]:
    """Vectorized NeighborNorm bisection for all segments at once.

    ``scores`` is a flat edge-score vector whose entries are grouped by
    ``seg`` (node id per edge). Returns ``(c, eta, statuses, evaluations)``;
    nodes without edges get ``c = 1`` and status ``degenerate_singleton``.
    """
    _check_target(T)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    seg = np.asarray(seg, dtype=np.int64)
    size = np.bincount(seg, minlength=n)
    smax = np.full(n, -np.inf)
    np.maximum.at(smax, seg, scores)
    smin = np.full(n, np.inf)
    np.minimum.at(smin, seg, scores)
    sums = np.zeros(n)
    np.add.at(sums, seg, scores)
    sq = np.zeros(n)
    mean = np.where(size > 0, sums / np.maximum(size, 1), 0.0)
    np.add.at(sq, seg, (scores - mean[seg]) ** 2)
    var = np.where(size > 0, sq / np.maximum(size, 1), 0.0)
    argmax_count = np.bincount(seg, weights=(scores == smax[seg]).astype(float), minlength=n)
    lnN = np.log(np.maximum(size, 2))
    floor = np.where(size >= 2, np.log(np.maximum(argmax_count, 1)) / lnN, 0.0)

    status = np.full(n, 0)  # index into _STATUS_CODES
    c = np.ones(n)
    eta = np.ones(n)
    evals = np.zeros(n, dtype=np.int64)

    singleton = size <= 1
    uniform = (~singleton) & (smax == smin)
    status[singleton] = _STATUS_CODES.index(CalibrationStatus.DEGENERATE_SINGLETON)
    status[uniform] = _STATUS_CODES.index(CalibrationStatus.DEGENERATE_UNIFORM)
    todo = ~(singleton | uniform)
    if T == 1.0:
        c[todo] = 0.0
        return c, eta, [_STATUS_CODES[k] for k in status], evals
    unreachable = todo & (T <= floor)
    if np.any(unreachable):
        c[unreachable] = W_MAX
        w = np.where(unreachable, W_MAX, 0.0)
        eta[unreachable] = segment_efficiency(scores, seg, n, w)[unreachable]
        evals[unreachable] = 1
        status[unreachable] = _STATUS_CODES.index(CalibrationStatus.TARGET_UNREACHABLE)
    todo &= ~unreachable

    lo = np.zeros(n)
    w0 = np.sqrt(np.maximum(2.0 * (lnN - T * lnN), 0.0) / np.where(var > 0, var, 1.0))
    hi = np.maximum(w0, 1e-6)
    done = ~todo

    def evaluate(w, active):
        evals[active] += 1
        return segment_efficiency(scores, seg, n, np.where(active, w, 0.0))

    # bracket by doubling
    active = todo.copy()
    e_hi = np.ones(n)
    e_hi[active] = evaluate(hi, active)[active]
    while True:
        grow = active & (e_hi > T + tol) & (evals < max_iter) & (hi < W_MAX)
        if not grow.any():
            break
        lo = np.where(grow, hi, lo)
        hi = np.where(grow, np.minimum(2.0 * hi, W_MAX), hi)
        e_new = evaluate(hi, grow)
        e_hi = np.where(grow, e_new, e_hi)
    hit = active & (np.abs(e_hi - T) <= tol)
    c[hit], eta[hit] = hi[hit], e_hi[hit]
    done |= hit
    stuck = active & ~hit & (e_hi > T + tol)
    c[stuck], eta[stuck] = hi[stuck], e_hi[stuck]
    status[stuck] = _STATUS_CODES.index(CalibrationStatus.TARGET_UNREACHABLE)
    done |= stuck

    # bisection
    while True:
        active = ~done & (evals < max_iter)
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        e_mid = evaluate(mid, active)
        hit = active & (np.abs(e_mid - T) <= tol)
        c[hit], eta[hit] = mid[hit], e_mid[hit]
        done |= hit
        up = active & ~hit & (e_mid > T)
        down = active & ~hit & (e_mid <= T)
        lo = np.where(up, mid, lo)
        hi = np.where(down, mid, hi)
        c = np.where(active & ~hit, mid, c)
        eta = np.where(active & ~hit, e_mid, eta)
    failed = ~done
    status[failed] = _STATUS_CODES.index(CalibrationStatus.TARGET_UNREACHABLE)
    return c, eta, [_STATUS_CODES[k] for k in status], evals
