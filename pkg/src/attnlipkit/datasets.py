"""Synthetic graph generators, the missing-vector transform, and a text graph format.

Text format (``.graph.txt``), one record per line::

    H <nodes> <edges> <feat_dim> <classes>
    N <id> <label> <mask> <f1> ... <fd>
    E <src> <dst>

Floats are written with ``repr`` (shortest round-trip decimal), so a
save/load cycle is lossless. ``label`` is -1 for unlabeled nodes and
``mask`` is one of ``unlabeled train val test``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Mask, SparseGraph

__all__ = [
    "TreesSpec",
    "MissingVectorSpec",
    "GraphFormatError",
    "gen_trees",
    "tree_answer",
    "trees_feature_layout",
    "missing_vector_transform",
    "gen_synthetic_citation",
    "save_graph",
    "load_graph",
    "dumps_graph",
    "loads_graph",
]


@dataclass(frozen=True)
class TreesSpec:
    depth: int
    num_trees: int = 500
    seed: int = 0


@dataclass(frozen=True)
class MissingVectorSpec:
    p: float
    seed: int = 0


class GraphFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


# ----------------------------------------------------------------------------
# TREES
# ----------------------------------------------------------------------------


def trees_feature_layout(depth: int) -> dict:
    """Column slices of the TREES node attributes for a given depth.

    Layout: ``[is_root, is_green, is_blue, class one-hot (k), cardinality one-hot (k)]``
    with ``k = 2^(depth-1)`` green nodes per tree.
    """
    k = 2 ** (depth - 1)
    return {
        "is_root": 0,
        "is_green": 1,
        "is_blue": 2,
        "class": slice(3, 3 + k),
        "cardinality": slice(3 + k, 3 + 2 * k),
        "dim": 3 + 2 * k,
        "k": k,
    }


def _one_tree(depth: int, rng: np.random.Generator) -> SparseGraph:
    lay = trees_feature_layout(depth)
    k = lay["k"]
    n = 2 ** (depth + 1) - 1
    parents = np.arange(1, n)
    src = (parents - 1) // 2  # heap layout: children of i are 2i+1, 2i+2
    dst = parents
    X = np.zeros((n, lay["dim"]))
    X[0, lay["is_root"]] = 1.0
    first_green = 2 ** (depth - 1) - 1
    first_leaf = 2**depth - 1
    X[first_leaf:, lay["is_blue"]] = 1.0
    classes = rng.permutation(k)
    cards = rng.permutation(k)  # cardinality value = index + 1
    for j, node in enumerate(range(first_green, first_leaf)):
        X[node, lay["is_green"]] = 1.0
        X[node, lay["class"].start + classes[j]] = 1.0
        X[node, lay["cardinality"].start + cards[j]] = 1.0
    query = rng.integers(k)
    X[0, lay["cardinality"].start + query] = 1.0
    labels = np.full(n, -1)
    labels[0] = classes[int(np.flatnonzero(cards == query)[0])]
    masks = np.zeros(n, dtype=np.int64)
    masks[0] = Mask.TRAIN
    return SparseGraph.from_edges(n, src, dst, X, labels, masks, num_classes=k)


def gen_trees(spec: TreesSpec) -> list[SparseGraph]:
    """Binary trees whose root label is the class of the green node matching the root's query.

    Edges point from the root towards the leaves, so each node aggregates
    over its children. Blue leaves carry only a colour flag; the green
    leaf-predecessors carry a class one-hot and a cardinality one-hot
    (cardinalities are distinct inside a tree, so the answer is unique).
    """
    if spec.depth < 2:
        raise ValueError("tree depth must be >= 2")
    rng = np.random.default_rng(spec.seed)
    return [_one_tree(spec.depth, rng) for _ in range(spec.num_trees)]


def tree_answer(tree: SparseGraph, depth: int) -> int:
    """Brute-force traversal: walk the tree from the root and return the matching green's class."""
    lay = trees_feature_layout(depth)
    query = int(np.argmax(tree.features[0, lay["cardinality"]]))
    stack = [0]
    while stack:
        u = stack.pop()
        x = tree.features[u]
        if x[lay["is_green"]] == 1.0 and x[lay["cardinality"]][query] == 1.0:
            return int(np.argmax(x[lay["class"]]))
        stack.extend(tree.neighbors(u).tolist())
    raise ValueError("no green node matches the root query")


# ----------------------------------------------------------------------------
# synthetic citation graphs
# ----------------------------------------------------------------------------


def gen_synthetic_citation(
    n: int,
    classes: int,
    homophily: float,
    feat_dim: int,
    seed: int = 0,
    avg_degree: float = 4.0,
    class_sep: float = 1.0,
    noise: float = 1.0,
) -> SparseGraph:
    """Undirected block-model graph with class-conditioned Gaussian features.

    Each of ``n * avg_degree / 2`` edges starts at a uniform node and ends at
    a node of the same class with probability ``homophily``, otherwise at a
    node of a different class. Masks are a seeded 60/20/20 split.
    """
    if n < classes or classes < 1:
        raise ValueError("need at least one node per class")
    if not (0.0 <= homophily <= 1.0):
        raise ValueError("homophily must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    members = [np.flatnonzero(labels == c) for c in range(classes)]
    m = int(round(n * avg_degree / 2))
    src = rng.integers(n, size=m)
    same = rng.random(m) < homophily
    dst = np.empty(m, dtype=np.int64)
    for e in range(m):
        c = labels[src[e]]
        if same[e] or classes == 1:
            pool = members[c]
        else:
            other = rng.integers(classes - 1)
            pool = members[other if other < c else other + 1]
        dst[e] = pool[rng.integers(pool.size)]
    keep = src != dst
    src, dst = src[keep], dst[keep]
    means = rng.standard_normal((classes, feat_dim)) * class_sep
    X = means[labels] + noise * rng.standard_normal((n, feat_dim))
    order = rng.permutation(n)
    masks = np.empty(n, dtype=np.int64)
    n_train, n_val = int(0.6 * n), int(0.2 * n)
    masks[order[:n_train]] = Mask.TRAIN
    masks[order[n_train : n_train + n_val]] = Mask.VAL
    masks[order[n_train + n_val :]] = Mask.TEST
    g = SparseGraph.from_edges(n, src, dst, X, labels, masks, num_classes=classes)
    return g.symmetrized()


def missing_vector_transform(graph: SparseGraph, spec: MissingVectorSpec) -> SparseGraph:
    """Zero the attributes of a random fraction ``p`` of the non-training nodes."""
    if not (0.0 <= spec.p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    unlabeled = np.flatnonzero(graph.masks != Mask.TRAIN)
    k = int(round(spec.p * unlabeled.size))
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(unlabeled, size=k, replace=False) if k else np.empty(0, dtype=np.int64)
    X = graph.features.copy()
    X[chosen] = 0.0
    return graph.replace(features=X)


# ----------------------------------------------------------------------------
# text format
# ----------------------------------------------------------------------------

_MASK_NAMES = {m.value: m.name.lower() for m in Mask}
_MASK_CODES = {v: k for k, v in _MASK_NAMES.items()}


def dumps_graph(graph: SparseGraph) -> str:
    lines = [f"H {graph.n} {graph.num_edges} {graph.feat_dim} {graph.num_classes}"]
    for u in range(graph.n):
        feats = " ".join(repr(float(x)) for x in graph.features[u])
        rec = f"N {u} {int(graph.labels[u])} {_MASK_NAMES[int(graph.masks[u])]}"
        lines.append(f"{rec} {feats}" if feats else rec)
    for s, t in zip(graph.sources.tolist(), graph.targets.tolist()):
        lines.append(f"E {s} {t}")
    return "\n".join(lines) + "\n"


def save_graph(graph: SparseGraph, path) -> None:
    Path(path).write_text(dumps_graph(graph))


def _parse_int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise GraphFormatError(lineno, f"bad {what} {tok!r}") from None


def loads_graph(text: str) -> SparseGraph:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("H "):
        raise GraphFormatError(1, "missing header 'H nodes edges feat_dim classes'")
    head = lines[0].split()
    if len(head) != 5:
        raise GraphFormatError(1, "header needs 4 fields")
    n, m, d, classes = (_parse_int(t, 1, "header field") for t in head[1:])
    if min(n, m, d, classes) < 0:
        raise GraphFormatError(1, "negative header field")
    X = np.zeros((n, d))
    labels = np.full(n, -1, dtype=np.int64)
    masks = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    src, dst = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "N":
            if len(parts) != 4 + d:
                raise GraphFormatError(lineno, f"node record needs {4 + d} fields, got {len(parts)}")
            u = _parse_int(parts[1], lineno, "node id")
            if not (0 <= u < n) or seen[u]:
                raise GraphFormatError(lineno, f"invalid or duplicate node id {u}")
            seen[u] = True
            labels[u] = _parse_int(parts[2], lineno, "label")
            if parts[3] not in _MASK_CODES:
                raise GraphFormatError(lineno, f"unknown mask {parts[3]!r}")
            masks[u] = _MASK_CODES[parts[3]]
            try:
                X[u] = [float(t) for t in parts[4:]]
            except ValueError:
                raise GraphFormatError(lineno, "bad feature value") from None
        elif tag == "E":
            if len(parts) != 3:
                raise GraphFormatError(lineno, "edge record needs 3 fields")
            s = _parse_int(parts[1], lineno, "edge source")
            t = _parse_int(parts[2], lineno, "edge target")
            if not (0 <= s < n and 0 <= t < n):
                raise GraphFormatError(lineno, f"edge ({s}, {t}) out of range")
            src.append(s)
            dst.append(t)
        else:
            raise GraphFormatError(lineno, f"unknown record tag {tag!r}")
    if not seen.all():
        raise GraphFormatError(len(lines), f"{int((~seen).sum())} node records missing")
    if len(src) != m:
        raise GraphFormatError(len(lines), f"expected {m} edges, found {len(src)}")
    return SparseGraph.from_edges(n, src, dst, X, labels, masks, classes, dedupe=False)


def load_graph(path) -> SparseGraph:
    return loads_graph(Path(path).read_text())
