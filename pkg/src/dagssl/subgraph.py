"""Neighborhood tree sampling around a target sample.

The tree has the target at its root. Level 1 is a fresh cosine search of
the feature bank with the target's current embedding; deeper levels reuse
the precomputed global k-NN adjacency (only the root's embedding is
current, everything else was banked at the epoch boundary). Duplicate bank
nodes may appear in different branches; the structure is a tree, not a DAG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .banks import FeatureBank
from .graph import DensityGraph, top_k_descending


@dataclass(frozen=True)
class TreeLevel:
    indices: np.ndarray  # (n,) int64 bank indices
    parents: np.ndarray  # (n,) int64 position in previous level, -1 = root
    features: np.ndarray  # (n, d) float64 raw banked features


@dataclass(frozen=True)
class SubGraphTree:
    root_feature: np.ndarray  # (d,) fresh embedding of the target
    levels: list[TreeLevel] = field(default_factory=list)
    k_sub: int = 0

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def node_count(self) -> int:
        return 1 + sum(level.indices.shape[0] for level in self.levels)


def query_neighbors(
    f: np.ndarray,
    bank: FeatureBank,
    k: int,
    exclude_index: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k bank rows by cosine similarity to `f`, ties to the smaller index.

    `exclude_index` removes the query's own bank entry (training time); pass
    None for queries that are not bank members (test time).
    """
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(f)
    if norm == 0.0:
        raise ValueError("query vector has zero norm")
    available = bank.size - (1 if exclude_index is not None else 0)
    if k < 1 or k > available:
        raise ValueError(f"k={k} not in [1, {available}] for this bank")
    scores = bank.normalized @ (f / norm)
    if exclude_index is not None:
        scores[exclude_index] = -np.inf
    idx = top_k_descending(scores, k)
    return idx, scores[idx]


def sample_subgraph(
    f: np.ndarray,
    self_index: int | None,
    bank: FeatureBank,
    graph: DensityGraph | None,
    k_sub: int,
    h: int,
) -> SubGraphTree:
    """Depth-h, fan-out-k_sub neighborhood tree rooted at embedding `f`.

    h=0 yields a bare root. Level 1 searches the bank with the fresh root
    embedding; levels >= 2 extend every node with its first k_sub global
    graph neighbors (`graph` required, graph.k >= k_sub).
    """
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    if h < 0:
        raise ValueError(f"depth must be >= 0, got {h}")
    tree = SubGraphTree(root_feature=f, levels=[], k_sub=k_sub)
    if h == 0:
        return tree
    idx, _ = query_neighbors(f, bank, k_sub, exclude_index=self_index)
    parents = np.full(idx.shape[0], -1, dtype=np.int64)
    tree.levels.append(TreeLevel(idx, parents, bank.matrix[idx]))
    for _ in range(1, h):
        if graph is None:
            raise ValueError("depth >= 2 requires the global graph")
        if graph.k < k_sub:
            raise ValueError(f"global graph has k={graph.k}, cannot fan out {k_sub}")
        prev = tree.levels[-1]
        children = graph.neighbors[prev.indices, :k_sub]  # (n_prev, k_sub)
        idx = children.reshape(-1)
        parents = np.repeat(np.arange(prev.indices.shape[0], dtype=np.int64), k_sub)
        tree.levels.append(TreeLevel(idx, parents, bank.matrix[idx]))
    return tree
