"""CSR sparse graph container.

Row ``u`` of the CSR structure lists the neighborhood ``N_u``: the nodes
whose representations node ``u`` aggregates. An edge ``u -> v`` therefore
carries a message from ``v`` to ``u``, matching the ``s_{u->v}`` score
notation. Undirected graphs store both directions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Mask", "SparseGraph", "disjoint_union"]


class Mask(enum.IntEnum):
    UNLABELED = 0
    TRAIN = 1
    VAL = 2
    TEST = 3


@dataclass
class SparseGraph:
    offsets: np.ndarray
    targets: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    num_classes: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=np.int64)
        n = self.offsets.size - 1
        if n < 0 or self.offsets[0] != 0 or np.any(np.diff(self.offsets) < 0):
            raise ValueError("CSR offsets must start at 0 and be non-decreasing")
        if self.offsets[-1] != self.targets.size:
            raise ValueError("last CSR offset must equal the edge count")
        if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= n):
            raise ValueError("edge target out of range")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be {n} x d")
        if self.labels.shape != (n,) or self.masks.shape != (n,):
            raise ValueError("labels and masks need one entry per node")

    @classmethod
    def from_edges(cls, n, src, dst, features, labels=None, masks=None, num_classes=0, dedupe=True):
        """Build from edge lists; edges are sorted by source (stable)."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if dedupe and src.size:
            key = np.unique(src * n + dst)
            src, dst = key // n, key % n
        order = np.argsort(src, kind="stable")
        src, dst = src[order], dst[order]
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
        labels = np.full(n, -1) if labels is None else labels
        masks = np.zeros(n, dtype=np.int64) if masks is None else masks
        return cls(offsets, dst, features, labels, masks, num_classes)

    @property
    def n(self) -> int:
        return self.offsets.size - 1

    @property
    def num_edges(self) -> int:
        return int(self.targets.size)

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def sources(self) -> np.ndarray:
        """Owning node of every edge (the segment id used by segment ops)."""
        if "sources" not in self._cache:
            self._cache["sources"] = np.repeat(np.arange(self.n), np.diff(self.offsets))
        return self._cache["sources"]

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors(self, u: int) -> np.ndarray:
        return self.targets[self.offsets[u] : self.offsets[u + 1]]

    def mask_index(self, kind: Mask) -> np.ndarray:
        return np.flatnonzero(self.masks == int(kind))

    def replace(self, **changes) -> "SparseGraph":
        data = dict(
            offsets=self.offsets,
            targets=self.targets,
            features=self.features,
            labels=self.labels,
            masks=self.masks,
            num_classes=self.num_classes,
        )
        data.update(changes)
        return SparseGraph(**data)

    def with_self_loops(self) -> "SparseGraph":
        """Same graph with a ``u -> u`` edge added wherever it is missing (cached)."""
        if "self_loops" not in self._cache:
            src = np.concatenate([self.sources, np.arange(self.n)])
            dst = np.concatenate([self.targets, np.arange(self.n)])
            g = SparseGraph.from_edges(self.n, src, dst, self.features, self.labels, self.masks, self.num_classes)
            self._cache["self_loops"] = g
        return self._cache["self_loops"]

    def symmetrized(self) -> "SparseGraph":
        src = np.concatenate([self.sources, self.targets])
        dst = np.concatenate([self.targets, self.sources])
        return SparseGraph.from_edges(self.n, src, dst, self.features, self.labels, self.masks, self.num_classes)

    def permuted(self, perm) -> "SparseGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return SparseGraph.from_edges(
            self.n,
            inv[self.sources],
            inv[self.targets],
            self.features[perm],
            self.labels[perm],
            self.masks[perm],
            self.num_classes,
        )

    def edge_set(self) -> set:
        return set(zip(self.sources.tolist(), self.targets.tolist()))


def disjoint_union(graphs) -> SparseGraph:
    """Batch graphs into one block-diagonal graph (node ids shifted per graph)."""
    graphs = list(graphs)
    if not graphs:
        raise ValueError("nothing to batch")
    shift = np.cumsum([0] + [g.n for g in graphs[:-1]])
    src = np.concatenate([g.sources + s for g, s in zip(graphs, shift)])
    dst = np.concatenate([g.targets + s for g, s in zip(graphs, shift)])
    n = int(sum(g.n for g in graphs))
    return SparseGraph.from_edges(
        n,
        src,
        dst,
        np.concatenate([g.features for g in graphs]),
        np.concatenate([g.labels for g in graphs]),
        np.concatenate([g.masks for g in graphs]),
        max(g.num_classes for g in graphs),
        dedupe=False,
    )
