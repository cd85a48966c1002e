"""Exact cosine k-NN graph with per-node density.

The density of a node is the mean cosine similarity to its k nearest
neighbors. Construction is a blocked brute-force scan: exact, deterministic
(ties broken toward the smaller index), and fast enough for the desk scale
this library targets (up to ~10^4 points).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_BLOCK_ROWS = 256


@dataclass(frozen=True)
class DensityGraph:
    """k-NN adjacency over a feature set plus per-node density.

    neighbors[i] lists the k most cosine-similar nodes to i (self excluded)
    in non-increasing similarity order; sims holds the matching similarities;
    densities[i] is the mean of sims[i].
    """

    k: int
    neighbors: np.ndarray  # (m, k) int64
    sims: np.ndarray  # (m, k) float64
    densities: np.ndarray  # (m,) float64

    @property
    def size(self) -> int:
        return self.neighbors.shape[0]


def l2_normalize(features: np.ndarray) -> np.ndarray:
    """Scale every row to unit Euclidean norm; rejects zero-norm rows."""
    arr = np.asarray(features)
    norms = np.linalg.norm(arr.astype(np.float64, copy=False), axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"row {bad} has zero norm")
    return (arr / norms[:, None].astype(arr.dtype)).astype(arr.dtype)


def top_k_descending(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ordered by (score desc, index asc).

    Exact under ties: every candidate tied with the k-th score competes, and
    the smaller index wins.
    """
    n = scores.shape[0]
    if k >= n:
        order = np.lexsort((np.arange(n), -scores))
        return order[:k]
    kth = np.partition(scores, n - k)[n - k]
    cand = np.flatnonzero(scores >= kth)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def build_knn_graph(features: np.ndarray, k: int) -> DensityGraph:
    """Exact cosine k-NN graph over the rows of `features`.

    Requires m > k >= 1. The scan is blocked over query rows but the result
    is independent of the block size.
    """
    f = np.ascontiguousarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {f.shape}")
    m = f.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if m <= k:
        raise ValueError(f"need m > k, got m={m}, k={k}")
    fn = l2_normalize(f)
    neighbors = np.empty((m, k), dtype=np.int64)
    sims = np.empty((m, k), dtype=np.float64)
    for start in range(0, m, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, m)
        block = fn[start:stop] @ fn.T
        block[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        for r in range(stop - start):
            idx = top_k_descending(block[r], k)
            neighbors[start + r] = idx
            sims[start + r] = block[r][idx]
    return DensityGraph(k=k, neighbors=neighbors, sims=sims,
                        densities=compute_densities(neighbors, sims))


def compute_densities(neighbors: np.ndarray, sims: np.ndarray) -> np.ndarray:
    """Per-node density: mean similarity over the node's neighbor list."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[1] == 0:
        raise ValueError("every node needs a non-empty neighbor list")
    if np.asarray(neighbors).shape != sims.shape:
        raise ValueError("adjacency and similarity shapes disagree")
    return sims.mean(axis=1)


def save_densities(densities: np.ndarray, path: str | Path) -> None:
    """Export densities as ``index,density`` text (17 significant digits)."""
    with open(path, "w") as fh:
        for i, rho in enumerate(densities):
            fh.write(f"{i},{rho:.17g}\n")


def load_densities(path: str | Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            idx, rho = line.split(",")
            rows.append((int(idx), float(rho)))
    rows.sort()
    if [i for i, _ in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: density file does not cover 0..{len(rows) - 1}")
    return np.array([rho for _, rho in rows], dtype=np.float64)
