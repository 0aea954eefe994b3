"""Sparse graph attention layers, the gated GRU-style framework, and training.

Layers are small parameter-spec objects; parameters live in a flat dict so
the same forward code runs on numpy arrays or tape ``Var`` leaves. Edge
quantities have shape ``(E, heads)`` and are grouped by the CSR row (the
aggregating node ``u``); ``seg`` below always means ``graph.sources``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .entropy import calibrate_segments
from .graph import Mask, SparseGraph
from .tensor import Var

__all__ = [
    "Normalization",
    "LayerConfig",
    "MLP",
    "GATLayer",
    "GraphTransformerLayer",
    "FrameworkConfig",
    "GRUFrameworkLayer",
    "GNNModel",
    "TrainLog",
    "neighbor_softmax_attention",
    "self_confidence",
    "attention_weights_with_self",
    "gru_framework_step",
    "gat_layer",
    "graph_transformer_layer",
    "cross_entropy",
    "train",
]


class Normalization(str, enum.Enum):
    NONE = "none"
    LIPSCHITZ = "lipschitz"
    ENTROPY = "neighbor_entropy"

    @classmethod
    def parse(cls, value) -> "Normalization":
        aliases = {"lip": "lipschitz", "entropy": "neighbor_entropy", None: "none"}
        return cls(aliases.get(value, value))


@dataclass
class LayerConfig:
    kind: str = "gat"
    heads: int = 1
    head_combine: str = "concat"
    normalization: str = "none"
    hidden_dim: int = 8
    attention_dropout: float = 0.0
    target_eta: float | None = None
    add_self_loops: bool = True
    activation: str | None = "relu"

    def __post_init__(self):
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.head_combine not in ("concat", "average"):
            raise ValueError("head_combine must be 'concat' or 'average'")
        if self.head_combine == "concat" and self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads when concatenating")
        if not (0.0 <= self.attention_dropout < 1.0):
            raise ValueError("attention_dropout must lie in [0, 1)")
        self.normalization = Normalization.parse(self.normalization).value
        if self.normalization == Normalization.ENTROPY.value and self.target_eta is None:
            raise ValueError("entropy normalization needs target_eta")


_ACTIVATIONS = {
    None: lambda x: x,
    "none": lambda x: x,
    "relu": T.relu,
    "elu": T.elu,
    "tanh": T.tanh,
    "leaky_relu": T.leaky_relu,
}


def _glorot(rng, fan_in, fan_out, shape=None):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def _segment_norm_max(x, nb, seg, n):
    """Largest neighbour 2-norm per segment: ``x`` is per node (n, H, F), result (n, H)."""
    norms = T.sqrt((x * x).sum(axis=-1))
    return T.maximum(T.segment_max(norms[nb], seg, n), 0.0)  # empty segments give 0, not -inf


def _fix_zero(den):
    """Replace exact zeros of a denominator by 1 (numerator is zero there too)."""
    zero = (T.value_of(den) == 0.0).astype(np.float64)
    if not zero.any():
        return den
    return den + zero


def _entropy_rescale(scores, seg, n, target, tol=1e-6):
    """Multiply each neighborhood's scores by its calibrated constant (stop-gradient)."""
    vals = T.value_of(scores)
    H = vals.shape[1]
    c = np.empty((n, H))
    for h in range(H):
        c[:, h] = calibrate_segments(vals[:, h], seg, n, target, tol=tol)[0]
    return scores * c[seg]


def _dropout(weights, rate, rng):
    if rate <= 0.0 or rng is None:
        return weights
    keep = (rng.random(T.value_of(weights).shape) >= rate) / (1.0 - rate)
    return weights * keep


# ----------------------------------------------------------------------------
# MLP
# ----------------------------------------------------------------------------


@dataclass
class MLP:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``; ``sizes=[d]`` is the identity."""

    sizes: Sequence[int]
    activation: str = "relu"
    bias: bool = True

    def param_shapes(self, prefix: str) -> dict:
        shapes = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            shapes[f"{prefix}W{i}"] = (a, b)
            if self.bias:
                shapes[f"{prefix}b{i}"] = (b,)
        return shapes

    def init(self, rng, prefix: str) -> dict:
        params = {}
        for name, shape in self.param_shapes(prefix).items():
            params[name] = _glorot(rng, *shape) if len(shape) == 2 else np.zeros(shape)
        return params

    def __call__(self, params: dict, prefix: str, x):
        act = _ACTIVATIONS[self.activation]
        last = len(self.sizes) - 2
        for i in range(len(self.sizes) - 1):
            x = x @ params[f"{prefix}W{i}"]
            if self.bias:
                x = x + params[f"{prefix}b{i}"]
            if i < last:
                x = act(x)
        return x


# ----------------------------------------------------------------------------
# GAT
# ----------------------------------------------------------------------------


@dataclass
class GATLayer:
    in_dim: int
    cfg: LayerConfig
    bias: bool = True

    @property
    def head_dim(self) -> int:
        c = self.cfg
        return c.hidden_dim // c.heads if c.head_combine == "concat" else c.hidden_dim

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    attention_params = ("a_src", "a_dst")

    def init(self, rng, prefix="") -> dict:
        H, F = self.cfg.heads, self.head_dim
        p = {
            prefix + "W": _glorot(rng, self.in_dim, H * F),
            prefix + "a_src": _glorot(rng, F, 1, (H, F)),
            prefix + "a_dst": _glorot(rng, F, 1, (H, F)),
        }
        if self.bias:
            p[prefix + "b"] = np.zeros(self.out_dim)
        return p

    def edge_scores(self, params, graph, Wh, prefix=""):
        """Raw or normalized pre-softmax scores, shape (E, H)."""
        seg, nb, n = graph.sources, graph.targets, graph.n
        a_src, a_dst = params[prefix + "a_src"], params[prefix + "a_dst"]
        # per-node projections, gathered per edge
        num = (Wh * a_dst).sum(axis=-1)[seg] + (Wh * a_src).sum(axis=-1)[nb]  # (E, H)
        norm = self.cfg.normalization
        if norm == Normalization.LIPSCHITZ.value:
            a2 = (a_dst * a_dst).sum(axis=-1) + (a_src * a_src).sum(axis=-1)  # (H,)
            xself = (Wh * Wh).sum(axis=-1)  # (n, H)
            xmax = T.sqrt(T.maximum(T.segment_max(xself[nb], seg, n), 0.0))  # largest neighbour norm, (n, H)
            den = T.sqrt(a2 * ((xmax * xmax) + xself))
            num = num / _fix_zero(den)[seg]
        scores = T.leaky_relu(num, 0.2)
        if norm == Normalization.ENTROPY.value:
            scores = _entropy_rescale(scores, seg, n, self.cfg.target_eta)
        return scores

    def __call__(self, params, h, graph, prefix="", rng=None, return_weights=False):
        if self.cfg.add_self_loops:
            graph = graph.with_self_loops()
        H, F, n = self.cfg.heads, self.head_dim, graph.n
        seg, nb = graph.sources, graph.targets
        Wh = (h @ params[prefix + "W"]).reshape((n, H, F))
        scores = self.edge_scores(params, graph, Wh, prefix)
        alpha = T.segment_softmax(scores, seg, n)
        weights = alpha
        alpha = _dropout(alpha, self.cfg.attention_dropout, rng)
        msg = alpha.reshape((graph.num_edges, H, 1)) * Wh[nb]
        out = T.segment_sum(msg, seg, n)
        out = out.reshape((n, H * F)) if self.cfg.head_combine == "concat" else out.sum(axis=1) * (1.0 / H)
        if self.bias:
            out = out + params[prefix + "b"]
        out = _ACTIVATIONS[self.cfg.activation](out)
        return (out, weights) if return_weights else out


def gat_layer(h, graph: SparseGraph, cfg: LayerConfig, params: dict):
    """Functional form of :class:`GATLayer` with unprefixed parameters."""
    layer = GATLayer(params["W"].shape[0], cfg, bias="b" in params)
    return layer(params, h, graph)


# ----------------------------------------------------------------------------
# Graph Transformer
# ----------------------------------------------------------------------------


@dataclass
class GraphTransformerLayer:
    in_dim: int
    cfg: LayerConfig
    bias: bool = True

    @property
    def head_dim(self) -> int:
        c = self.cfg
        return c.hidden_dim // c.heads if c.head_combine == "concat" else c.hidden_dim

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    attention_params = ("Wq", "Wk")

    def init(self, rng, prefix="") -> dict:
        HF = self.cfg.heads * self.head_dim
        p = {prefix + k: _glorot(rng, self.in_dim, HF) for k in ("Wq", "Wk", "Wv")}
        if self.bias:
            p[prefix + "b"] = np.zeros(self.out_dim)
        return p

    def __call__(self, params, h, graph, prefix="", rng=None, return_weights=False):
        H, F, n = self.cfg.heads, self.head_dim, graph.n
        seg, nb = graph.sources, graph.targets
        Q = (h @ params[prefix + "Wq"]).reshape((n, H, F))
        K = (h @ params[prefix + "Wk"]).reshape((n, H, F))
        V = (h @ params[prefix + "Wv"]).reshape((n, H, F))
        Kv, Vv = K[nb], V[nb]
        raw = (Q[seg] * Kv).sum(axis=-1)  # (E, H)
        norm = self.cfg.normalization
        if norm == Normalization.LIPSCHITZ.value:
            u = T.sqrt((Q * Q).sum(axis=-1))  # (n, H)
            v = _segment_norm_max(K, nb, seg, n)
            w = _segment_norm_max(V, nb, seg, n)
            den = T.maximum(T.maximum(u * v, u * w), v * w)
            scores = raw / _fix_zero(den)[seg]
        else:
            scores = raw * (1.0 / math.sqrt(F))
            if norm == Normalization.ENTROPY.value:
                scores = _entropy_rescale(scores, seg, n, self.cfg.target_eta)
        alpha = T.segment_softmax(scores, seg, n)
        weights = alpha
        alpha = _dropout(alpha, self.cfg.attention_dropout, rng)
        out = T.segment_sum(alpha.reshape((graph.num_edges, H, 1)) * Vv, seg, n)
        out = out.reshape((n, H * F)) if self.cfg.head_combine == "concat" else out.sum(axis=1) * (1.0 / H)
        if self.bias:
            out = out + params[prefix + "b"]
        out = _ACTIVATIONS[self.cfg.activation](out)
        return (out, weights) if return_weights else out


def graph_transformer_layer(h, graph: SparseGraph, cfg: LayerConfig, params: dict):
    layer = GraphTransformerLayer(params["Wq"].shape[0], cfg, bias="b" in params)
    return layer(params, h, graph)


# ----------------------------------------------------------------------------
# gated framework
# ----------------------------------------------------------------------------


def neighbor_softmax_attention(
    h,
    graph: SparseGraph,
    phi,
    normalization: str = "none",
    target_eta: float | None = None,
    phi_lipschitz: float | None = None,
    alpha: float = 1.0,
):
    """Per-edge weights ``softmax_{v in N_u}(phi(h_u || h_v))``, shape (E,).

    ``phi`` maps stacked pair features (E, 2d) to scores (E, 1) or (E,).
    ``lipschitz`` divides each neighborhood's scores by
    ``max{max_v |s_uv|, L * max_v |(h_u || h_v)|} / alpha`` with ``L``
    an upper bound on the Lipschitz constant of ``phi``; ``neighbor_entropy``
    calibrates every neighborhood to efficiency ``target_eta``.
    """
    seg, nb, n = graph.sources, graph.targets, graph.n
    pair = T.concat([h[seg], h[nb]], axis=1)
    s = phi(pair).reshape((graph.num_edges, 1))
    norm = Normalization.parse(normalization)
    if norm is Normalization.LIPSCHITZ:
        if phi_lipschitz is None:
            raise ValueError("lipschitz normalization needs phi_lipschitz")
        smax = T.segment_max(T.maximum(s, -s), seg, n)
        xmax = T.segment_max(T.sqrt((pair * pair).sum(axis=1)).reshape((graph.num_edges, 1)), seg, n)
        den = T.maximum(smax, xmax * phi_lipschitz)
        s = s * alpha / _fix_zero(den)[seg]
    elif norm is Normalization.ENTROPY:
        s = _entropy_rescale(s, seg, n, target_eta)
    return T.segment_softmax(s, seg, n).reshape((graph.num_edges,))


def self_confidence(h_u, neighbor_reprs, g, psi) -> float:
    """``sigmoid(g(h_u || sum_v psi(h_v)))``; 1 for an empty neighborhood."""
    neighbor_reprs = np.asarray(neighbor_reprs, dtype=np.float64)
    if neighbor_reprs.size == 0:
        return 1.0
    pooled = np.sum(np.atleast_2d(np.asarray(psi(np.atleast_2d(neighbor_reprs)))), axis=0)
    z = np.asarray(g(np.concatenate([np.asarray(h_u, dtype=np.float64), pooled])[None, :])).reshape(-1)
    return float(T.sigmoid(z)[0])


def attention_weights_with_self(e_u: float, neighbor_weights) -> tuple[float, np.ndarray]:
    """Return ``(a_uu, a_uv)`` with ``a_uu = e_u`` and ``a_uv = (1 - e_u) e_{u->v}``."""
    w = np.asarray(neighbor_weights, dtype=np.float64)
    if not (0.0 <= e_u <= 1.0):
        raise ValueError("self-confidence must lie in [0, 1]")
    if w.size and (np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9):
        raise ValueError("neighbor weights must be a probability vector")
    if w.size == 0:
        return 1.0, w
    return e_u, (1.0 - e_u) * w


PRESETS = ("full", "memoryless_gnn", "gat_like", "ggnn_like")


@dataclass
class FrameworkConfig:
    """Gated framework wiring.

    ``phi_hidden``/``g_hidden``/``psi_dim``/``theta_hidden`` size the MLPs;
    ``self_weight`` is the fixed ``a_uu`` of the memoryless preset.
    """

    preset: str = "full"
    phi_hidden: Sequence[int] = (16,)
    g_hidden: Sequence[int] = (16,)
    psi_dim: int = 16
    theta_hidden: Sequence[int] = (16,)
    epsilon: float = 0.0
    transform_first: bool = True
    normalization: str = "none"
    target_eta: float | None = None
    self_weight: float = 1.0
    activation: str | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.normalization = Normalization.parse(self.normalization).value


@dataclass
class GRUFrameworkLayer:
    """``h_u' = sum_v a_uv z_v + a_uu UPDATE(z_u, S_u)`` with GIN update and gated self weight."""

    in_dim: int
    out_dim: int
    cfg: FrameworkConfig = field(default_factory=FrameworkConfig)

    def _mlps(self):
        d = self.out_dim
        c = self.cfg
        return {
            "phi.": MLP([2 * d, *c.phi_hidden, 1]),
            "psi.": MLP([d, c.psi_dim]),
            "g.": MLP([d + c.psi_dim, *c.g_hidden, 1]),
            "theta.": MLP([d, *c.theta_hidden, d]),
        }

    @property
    def attention_params(self):
        return tuple(self._mlps()["phi."].param_shapes("phi."))

    def init(self, rng, prefix="") -> dict:
        if not self.cfg.transform_first and self.in_dim != self.out_dim:
            raise ValueError("transform_first=False needs in_dim == out_dim")
        p = {}
        if self.cfg.transform_first:
            p[prefix + "W"] = _glorot(rng, self.in_dim, self.out_dim)
        for name, mlp in self._mlps().items():
            p.update(mlp.init(rng, prefix + name))
        return p

    def weights(self, params, z, graph, prefix=""):
        """Self weights ``a_uu`` (n,) and neighbor weights ``a_uv`` (E,)."""
        c = self.cfg
        seg, nb, n = graph.sources, graph.targets, graph.n
        mlps = self._mlps()
        deg = graph.degrees()
        has_nb = (deg > 0).astype(np.float64)
        if c.preset == "memoryless_gnn":
            e_nb = T.segment_softmax(np.zeros(graph.num_edges), seg, n)
            e_u = np.where(deg > 0, c.self_weight, 1.0)
        else:
            phi = lambda x: mlps["phi."](params, prefix + "phi.", x)  # noqa: E731
            lip = None
            if c.normalization == Normalization.LIPSCHITZ.value:
                lip = 1.0
                for name in mlps["phi."].param_shapes(prefix + "phi."):
                    if ".W" in name[len(prefix) :]:
                        lip = lip * T.sqrt((params[name] * params[name]).sum())
            e_nb = neighbor_softmax_attention(z, graph, phi, c.normalization, c.target_eta, phi_lipschitz=lip)
            if c.preset == "ggnn_like":
                e_u = np.ones(n)
            else:
                pooled = T.segment_sum(mlps["psi."](params, prefix + "psi.", z[nb]), seg, n)
                gate = mlps["g."](params, prefix + "g.", T.concat([z, pooled], axis=1))
                e_u = T.sigmoid(gate.reshape((n,)))
                e_u = e_u * has_nb + (1.0 - has_nb)
        return e_u, (1.0 - e_u)[seg] * e_nb

    def __call__(self, params, h, graph, prefix="", rng=None, return_weights=False):
        c = self.cfg
        seg, nb, n = graph.sources, graph.targets, graph.n
        z = h @ params[prefix + "W"] if c.transform_first else h
        a_uu, a_uv = self.weights(params, z, graph, prefix)
        out = T.segment_sum(a_uv.reshape((graph.num_edges, 1)) * z[nb], seg, n)
        if c.preset != "gat_like":
            agg = T.segment_sum(z[nb], seg, n)
            upd = self._mlps()["theta."](params, prefix + "theta.", z * (1.0 + c.epsilon) + agg)
            out = out + upd * a_uu.reshape((n, 1))
        out = _ACTIVATIONS[c.activation](out)
        return (out, (a_uu, a_uv)) if return_weights else out


def gru_framework_step(h, graph: SparseGraph, cfg: FrameworkConfig, params: dict):
    """One framework update with unprefixed parameters."""
    d_out = params["theta.W0"].shape[0]
    d_in = params["W"].shape[0] if cfg.transform_first else d_out
    layer = GRUFrameworkLayer(d_in, d_out, cfg)
    return layer(params, h, graph)


# ----------------------------------------------------------------------------
# model + training
# ----------------------------------------------------------------------------


@dataclass
class GNNModel:
    """A stack of graph layers with an optional linear readout to class logits."""

    layers: list
    num_classes: int | None = None

    def _readout_dim(self):
        return self.layers[-1].out_dim

    def init(self, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.init(rng, prefix=f"l{i}."))
        if self.num_classes is not None:
            params["out.W"] = _glorot(rng, self._readout_dim(), self.num_classes)
            params["out.b"] = np.zeros(self.num_classes)
        return params

    def attention_param_names(self, layer_index: int) -> list[str]:
        layer = self.layers[layer_index]
        return [f"l{layer_index}.{name}" for name in layer.attention_params]

    def forward(self, params: dict, graph: SparseGraph, rng=None):
        h = graph.features
        for i, layer in enumerate(self.layers):
            h = layer(params, h, graph, prefix=f"l{i}.", rng=rng)
        if self.num_classes is not None:
            h = h @ params["out.W"] + params["out.b"]
        return h


def cross_entropy(logits, labels: np.ndarray, index: np.ndarray):
    """Mean softmax cross-entropy over the rows ``index``."""
    rows = logits[index]
    m = T.stop_gradient(rows.max(axis=1, keepdims=True)) if isinstance(rows, Var) else rows.max(axis=1, keepdims=True)
    z = rows - m
    lse = T.log(T.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = logp[(np.arange(len(index)), labels[index])]
    return picked.sum() * (-1.0 / len(index))


@dataclass
class TrainLog:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)  # per epoch: one norm per layer
    diverged: bool = False
    params: dict | None = None


def _accuracy(pred, labels, idx):
    if idx.size == 0:
        return float("nan")
    return float(np.mean(pred[idx] == labels[idx]))


def train(
    model: GNNModel,
    graph: SparseGraph,
    epochs: int,
    optimizer: str = "adam",
    lr: float = 0.005,
    weight_decay: float = 5e-4,
    seed: int = 0,
    params: dict | None = None,
    grad_hook: bool = False,
    eval_every: int = 1,
) -> TrainLog:
    """Full-batch training on the train mask; deterministic for a given seed.

    Adam/SGD with L2 weight decay added to the gradient. With ``grad_hook``
    the 2-norm of each layer's attention-parameter gradient is logged per
    epoch. A non-finite loss stops training and sets ``diverged``.
    """
    train_idx = graph.mask_index(Mask.TRAIN)
    if train_idx.size == 0:
        raise ValueError("graph has no training nodes")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    params = {k: v.copy() for k, v in (params or model.init(seed)).items()}
    val_idx, test_idx = graph.mask_index(Mask.VAL), graph.mask_index(Mask.TEST)
    rng = np.random.default_rng(seed + 1)
    names = sorted(params)
    m1 = {k: np.zeros_like(params[k]) for k in names}
    m2 = {k: np.zeros_like(params[k]) for k in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    att_names = [model.attention_param_names(i) for i in range(len(model.layers))]
    log = TrainLog()
    for epoch in range(epochs):
        tape = T.Tape()
        leaves = {k: tape.leaf(params[k], name=k) for k in names}
        logits = model.forward(leaves, graph, rng=rng)
        loss = cross_entropy(logits, graph.labels, train_idx)
        lval = float(loss.value)
        if not np.isfinite(lval):
            log.diverged = True
            log.loss.append(lval)
            break
        T.backward(tape, loss)
        grads = {k: leaves[k].grad for k in names}
        logits = logits.value
        tape.clear()
        if grad_hook:
            log.grad_norms.append(
                [float(np.sqrt(sum(np.sum(grads[a] ** 2) for a in group))) for group in att_names]
            )
        log.loss.append(lval)
        if epoch % eval_every == 0 or epoch == epochs - 1:
            pred = np.argmax(logits, axis=1)
            log.train_acc.append(_accuracy(pred, graph.labels, train_idx))
            log.val_acc.append(_accuracy(pred, graph.labels, val_idx))
            log.test_acc.append(_accuracy(pred, graph.labels, test_idx))
        if lr == 0.0:
            continue
        t = epoch + 1
        for k in names:
            g = grads[k] + weight_decay * params[k] if weight_decay else grads[k]
            if optimizer == "sgd":
                params[k] = params[k] - lr * g
            else:
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1**t)
                vhat = m2[k] / (1 - b2**t)
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
        if not all(np.all(np.isfinite(params[k])) for k in names):
            log.diverged = True
            break
    log.params = params
    return log
