"""Empirical Lipschitz estimates, Jacobian norms, gradient-flow tracking and bound reports.

Sampling estimates are lower bounds on the true Lipschitz constant: they
take the worst ratio ``|f(X+H) - f(X)|_F / |H|_F`` seen over random inputs
and directions. Reports keep the max over samples, never the mean.
"""

from __future__ import annotations

import enum
import io
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import attention
from .graph import SparseGraph
from .lipnorm import (
    BoundReportRow,
    LipschitzGenericScore,
    LipschitzLinearScore,
    LipschitzQuadraticScore,
    _jacobian,
    composition_bound,
    theoretical_bound,
)

__all__ = [
    "EstimateMethod",
    "LipschitzEstimate",
    "GradientFlowReport",
    "AttentionConfig",
    "empirical_lipschitz",
    "jacobian_operator_norm",
    "gradient_flow",
    "composition_check",
    "attention_map",
    "bound_report",
    "bound_report_csv",
    "thread_count",
]


class EstimateMethod(str, enum.Enum):
    RATIO_SAMPLING = "ratio_sampling"
    JACOBIAN_POWER = "jacobian_power"


@dataclass
class LipschitzEstimate:
    empirical: float
    samples: int
    perturbation_scale: float
    theoretical: float = math.inf
    method: EstimateMethod = EstimateMethod.RATIO_SAMPLING

    def __post_init__(self):
        if not self.empirical >= 0.0:
            raise ValueError("empirical estimate must be non-negative")
        if self.samples < 1:
            raise ValueError("need at least one sample")


def thread_count() -> int:
    """Worker cap from ``ATTNLIPKIT_THREADS`` (default 1, i.e. serial)."""
    raw = os.environ.get("ATTNLIPKIT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"ATTNLIPKIT_THREADS must be an integer, got {raw!r}") from None


def _parallel_map(fn, items):
    items = list(items)
    k = min(thread_count(), len(items))
    if k <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as pool:
        return list(pool.map(fn, items))  # ordered, so reductions stay deterministic


def empirical_lipschitz(
    f: Callable[[np.ndarray], np.ndarray],
    sampler: Callable[[np.random.Generator], np.ndarray],
    n_samples: int,
    perturbation_scale: float = 1e-4,
    perturbations: int = 1,
    relative: bool = True,
    seed: int = 0,
    theoretical: float = math.inf,
) -> LipschitzEstimate:
    """Max finite-difference ratio over ``n_samples`` inputs, ``perturbations`` directions each.

    ``sampler(rng)`` draws an input. Each direction is Gaussian, rescaled to
    Frobenius norm ``perturbation_scale`` (times ``|X|_F`` when ``relative``;
    an all-zero input falls back to the absolute scale).
    """
    if n_samples < 1 or perturbations < 1:
        raise ValueError("n_samples and perturbations must be >= 1")
    if perturbation_scale <= 0:
        raise ValueError("perturbation_scale must be positive")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_samples):
        X = np.asarray(sampler(rng), dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise ValueError("sampler produced a non-finite input")
        fx = np.asarray(T.value_of(f(X)), dtype=np.float64)
        xn = float(np.linalg.norm(X))
        eps = perturbation_scale * xn if relative and xn > 0 else perturbation_scale
        for _ in range(perturbations):
            H = rng.standard_normal(X.shape)
            H *= eps / np.linalg.norm(H)
            fy = np.asarray(T.value_of(f(X + H)), dtype=np.float64)
            ratio = float(np.linalg.norm(fy - fx)) / eps
            if not math.isfinite(ratio):
                raise ValueError("map produced a non-finite output")
            best = max(best, ratio)
    return LipschitzEstimate(best, n_samples * perturbations, perturbation_scale, theoretical)


def jacobian_operator_norm(f: Callable, X, tol: float = 1e-10, max_iter: int = 1000, seed: int = 0) -> float:
    """Spectral norm of the flattened Jacobian of ``f`` at ``X``.

    The Jacobian is assembled row by row from reverse-mode products, then
    power iteration runs on ``J^T J``.
    """
    X = np.asarray(X, dtype=np.float64)
    _, J = _jacobian(f, X)
    if J.size == 0:
        return 0.0
    lam = T.power_iteration(lambda v: J.T @ (J @ v), J.shape[1], tol=tol, max_iter=max_iter, seed=seed)
    return float(np.sqrt(max(lam, 0.0)))


# ----------------------------------------------------------------------------
# gradient flow
# ----------------------------------------------------------------------------


@dataclass
class GradientFlowReport:
    layers: int
    epochs: int
    grad_norms: np.ndarray  # layers x epochs
    loss: list = field(default_factory=list)
    diverged: bool = False

    def growth(self) -> float:
        """Largest norm seen anywhere divided by the largest epoch-0 norm (inf if divergent)."""
        if self.diverged:
            return math.inf
        if self.grad_norms.size == 0:
            return 1.0
        first = float(self.grad_norms[:, 0].max())
        top = float(self.grad_norms.max())
        if not math.isfinite(top):
            return math.inf
        return top / first if first > 0 else (math.inf if top > 0 else 1.0)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("layer,epoch,grad_norm\n")
        for i in range(self.grad_norms.shape[0]):
            for j in range(self.grad_norms.shape[1]):
                out.write(f"{i},{j},{float(self.grad_norms[i, j])!r}\n")
        return out.getvalue()


def gradient_flow(
    model,
    graph: SparseGraph,
    epochs: int,
    seed: int = 0,
    params: dict | None = None,
    **train_kwargs,
) -> GradientFlowReport:
    """Train with the gradient hook armed and collect per-layer attention gradient norms.

    Epochs after a divergence are missing from ``grad_norms`` (the report
    has fewer columns than requested) and ``diverged`` is set.
    """
    from .gnn import train

    if not any(layer.attention_params for layer in model.layers):
        raise ValueError("model has no attention layer")
    log = train(model, graph, epochs, seed=seed, params=params, grad_hook=True, **train_kwargs)
    G = np.asarray(log.grad_norms, dtype=np.float64).reshape(-1, len(model.layers)).T
    return GradientFlowReport(len(model.layers), G.shape[1], G, list(log.loss), log.diverged)


def composition_check(report: GradientFlowReport, layer_bounds: Sequence[float]) -> tuple[float, float, bool]:
    """Epoch-0 gradient ratio first/last layer against the product of per-layer bounds.

    Returns ``(ratio, bound, ok)``.
    """
    if report.epochs == 0:
        raise ValueError("report has no epochs")
    first, last = float(report.grad_norms[0, 0]), float(report.grad_norms[-1, 0])
    ratio = first / last if last > 0 else (math.inf if first > 0 else 0.0)
    bound = composition_bound(layer_bounds)
    return ratio, bound, ratio <= bound * (1.0 + 1e-9)


# ----------------------------------------------------------------------------
# bound reports
# ----------------------------------------------------------------------------


_KINDS = ("linear", "transformer", "generic", "unnormalized_linear", "unnormalized_transformer")


@dataclass(frozen=True)
class AttentionConfig:
    """One row of a bound sweep.

    ``linear``/``unnormalized_linear`` attend ``m`` learned queries over ``n``
    inputs of dimension ``d``; the transformer kinds use ``m = n`` queries
    built from the stacked input ``(Q || K || V)``. ``generic`` applies the
    general normalization with scale ``alpha`` to a linear score. Unnormalized
    kinds are compared against the linear closed form as witnesses.
    """

    kind: str
    m: int = 1
    n: int = 2
    d: int = 4
    alpha: float = 1.0
    input_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown attention config kind {self.kind!r}")
        if min(self.m, self.n, self.d) < 1:
            raise ValueError("m, n, d must be >= 1")
        if self.kind.endswith("transformer") and self.m != self.n:
            raise ValueError("transformer configs need m == n")

    def theoretical(self) -> float:
        if self.kind == "generic":
            return theoretical_bound("general", self.m, self.n, self.alpha)
        if self.kind == "transformer":
            return theoretical_bound("transformer", self.m, self.n)
        return theoretical_bound("linear", self.m, self.n)

    def input_rows(self) -> int:
        return 3 * self.d if self.kind.endswith("transformer") else self.d


def attention_map(cfg: AttentionConfig, rng: np.random.Generator) -> Callable:
    """Draw the learned parameters of ``cfg`` and return ``X -> Att(X)``."""
    d, m = cfg.d, cfg.m
    if cfg.kind.endswith("transformer"):
        score = LipschitzQuadraticScore(d)
        if cfg.kind == "transformer":
            return lambda X: attention(X, score, score.values).output

        def raw(X):
            Q, K, _ = score.split(X)
            return (Q.T @ K) * (1.0 / math.sqrt(d))

        return lambda X: attention(X, raw, score.values).output
    Q = rng.standard_normal((d, m)) * cfg.input_scale
    if cfg.kind == "linear":
        g = LipschitzLinearScore(Q)
    elif cfg.kind == "generic":
        g = LipschitzGenericScore(lambda X: Q.T @ X, float(np.linalg.norm(Q)), cfg.alpha)
    else:
        g = lambda X: Q.T @ X  # noqa: E731
    return lambda X: attention(X, g).output


def _one_config(cfg: AttentionConfig, seeds: Sequence[int], samples: int, perturbations: int) -> BoundReportRow:
    best = 0.0
    total = 0
    for s in seeds:
        rng = np.random.default_rng([int(s), zlib.crc32(repr(cfg).encode())])
        f = attention_map(cfg, rng)
        rows = cfg.input_rows()
        sampler = lambda r: r.standard_normal((rows, cfg.n)) * cfg.input_scale  # noqa: E731
        est = empirical_lipschitz(f, sampler, samples, perturbations=perturbations, seed=int(rng.integers(2**32)))
        best = max(best, est.empirical)
        total += est.samples
    return BoundReportRow(cfg.kind, cfg.m, cfg.n, cfg.alpha, cfg.theoretical(), best, total)


def bound_report(
    configs: Sequence[AttentionConfig],
    seeds: Sequence[int] = (0,),
    samples: int = 100,
    perturbations: int = 1,
) -> list[BoundReportRow]:
    """One row per config: closed-form bound, max empirical ratio over all seeds and samples."""
    return _parallel_map(lambda c: _one_config(c, seeds, samples, perturbations), configs)


def bound_report_csv(rows: Sequence[BoundReportRow]) -> str:
    out = io.StringIO()
    out.write("kind,m,n,alpha,theoretical,empirical,samples,pass\n")
    for r in rows:
        out.write(
            f"{r.kind},{r.m},{r.n},{float(r.alpha)!r},{float(r.theoretical)!r},"
            f"{float(r.empirical)!r},{r.samples},{str(r.satisfied).lower()}\n"
        )
    return out.getvalue()
