"""Density-ascending paths and path-based label propagation.

A path starts at an origin node and repeatedly jumps to the Euclidean-nearest
node of strictly higher density, stopping when no such node exists, when the
jump would exceed the distance threshold sigma, or at the length cap. Labels
flow along these paths in two phases: first from labelled origins (visited in
decreasing density order), then from the remaining unlabelled origins toward
any labelled node their path crosses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELLED_STATE = 0
GROUND_TRUTH = 1
PSEUDO = 2

LABEL_SOURCE_POLICIES = ("max_density", "origin")

_BLOCK_ROWS = 64


class LabelBank:
    """Per-sample label state: ground-truth, pseudo, or unlabelled.

    Ground-truth entries are fixed at construction and can never be
    overwritten; pseudo entries may be assigned and cleared freely.
    """

    def __init__(self, kinds: np.ndarray, labels: np.ndarray):
        kinds = np.asarray(kinds, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if kinds.shape != labels.shape or kinds.ndim != 1:
            raise ValueError("kinds and labels must be matching 1-D arrays")
        if np.any((kinds == UNLABELLED_STATE) & (labels != -1)):
            raise ValueError("unlabelled entries must carry label -1")
        if np.any((kinds != UNLABELLED_STATE) & (labels < 0)):
            raise ValueError("labelled entries need a non-negative class id")
        self.kinds = kinds
        self.labels = labels

    @classmethod
    def from_ground_truth(
        cls, m: int, labelled: np.ndarray, labels: np.ndarray
    ) -> "LabelBank":
        """Bank with GROUND_TRUTH at `labelled` indices, UNLABELLED elsewhere."""
        kinds = np.full(m, UNLABELLED_STATE, dtype=np.uint8)
        out = np.full(m, -1, dtype=np.int64)
        labelled = np.asarray(labelled, dtype=np.int64)
        kinds[labelled] = GROUND_TRUTH
        out[labelled] = np.asarray(labels, dtype=np.int64)[labelled]
        return cls(kinds, out)

    @property
    def size(self) -> int:
        return self.kinds.shape[0]

    def copy(self) -> "LabelBank":
        return LabelBank(self.kinds.copy(), self.labels.copy())

    def set_pseudo(self, index: int, label: int) -> None:
        if self.kinds[index] == GROUND_TRUTH:
            raise ValueError(f"index {index} is ground truth and cannot be overwritten")
        self.kinds[index] = PSEUDO
        self.labels[index] = label

    def clear_pseudo(self, indices: np.ndarray) -> None:
        indices = np.asarray(indices, dtype=np.int64)
        if np.any(self.kinds[indices] == GROUND_TRUTH):
            raise ValueError("cannot clear ground-truth entries")
        self.kinds[indices] = UNLABELLED_STATE
        self.labels[indices] = -1

    def labelled_mask(self) -> np.ndarray:
        return self.kinds != UNLABELLED_STATE

    def to_label_array(self) -> np.ndarray:
        """Labels with -1 sentinels, suitable for dataio.save_labels."""
        return self.labels.copy()


@dataclass(frozen=True)
class DensityPath:
    """Node sequence with strictly ascending densities and bounded jumps."""

    nodes: np.ndarray  # (K,) int64, nodes[0] is the origin

    @property
    def length(self) -> int:
        return self.nodes.shape[0]


def next_higher_density(
    v: int, features: np.ndarray, densities: np.ndarray
) -> int | None:
    """Euclidean-nearest node with density strictly above node v's, or None.

    Candidates are the whole set (not just graph neighbors); distance ties
    break toward the smaller index, exact density ties are not candidates.
    """
    features = np.asarray(features, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    higher = densities > densities[v]
    if not higher.any():
        return None
    d2 = ((features - features[v]) ** 2).sum(axis=1)
    d2[~higher] = np.inf
    return int(np.argmin(d2))  # first minimum = smallest index


def build_path(
    u: int,
    features: np.ndarray,
    densities: np.ndarray,
    sigma: float,
    l_max: int,
) -> DensityPath:
    """Grow the density-ascending path from origin u.

    Extension stops when no higher-density node exists, when the next jump
    is longer than sigma, or when the path reaches l_max nodes.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    nodes = [int(u)]
    while len(nodes) < l_max:
        nxt = next_higher_density(nodes[-1], features, densities)
        if nxt is None:
            break
        dist = float(np.sqrt(((features[nxt] - features[nodes[-1]]) ** 2).sum()))
        if dist > sigma:
            break
        nodes.append(nxt)
    return DensityPath(np.array(nodes, dtype=np.int64))


def successor_table(
    features: np.ndarray, densities: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized next_higher_density for every node at once.

    Returns (succ, dist): succ[v] = -1 where no higher-density node exists,
    dist[v] = Euclidean distance to succ[v] (inf where succ is -1). Row
    arithmetic matches next_higher_density exactly, so chasing this table
    reproduces build_path.
    """
    features = np.asarray(features, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    m = features.shape[0]
    succ = np.full(m, -1, dtype=np.int64)
    dist = np.full(m, np.inf)
    for start in range(0, m, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, m)
        diffs = features[start:stop, None, :] - features[None, :, :]
        d2 = (diffs**2).sum(axis=2)
        higher = densities[None, :] > densities[start:stop, None]
        d2[~higher] = np.inf
        rows_have = higher.any(axis=1)
        best = np.argmin(d2, axis=1)
        rows = np.flatnonzero(rows_have)
        succ[start + rows] = best[rows]
        dist[start + rows] = np.sqrt(d2[rows, best[rows]])
    return succ, dist


def follow_successors(
    u: int, succ: np.ndarray, dist: np.ndarray, sigma: float, l_max: int
) -> list[int]:
    nodes = [int(u)]
    while len(nodes) < l_max:
        last = nodes[-1]
        nxt = succ[last]
        if nxt < 0 or dist[last] > sigma:
            break
        nodes.append(int(nxt))
    return nodes


def nn_distances(features: np.ndarray) -> np.ndarray:
    """Euclidean distance from each node to its nearest other node."""
    features = np.asarray(features, dtype=np.float64)
    m = features.shape[0]
    if m < 2:
        raise ValueError("need at least two nodes")
    out = np.empty(m)
    for start in range(0, m, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, m)
        diffs = features[start:stop, None, :] - features[None, :, :]
        d2 = (diffs**2).sum(axis=2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.sqrt(d2.min(axis=1))
    return out


def propagate(
    features: np.ndarray,
    densities: np.ndarray,
    bank: LabelBank,
    labelled: np.ndarray,
    unlabelled: np.ndarray,
    sigma: float,
    l_max: int,
    label_source: str = "max_density",
) -> LabelBank:
    """Two-phase label propagation along density-ascending paths.

    Phase 1 walks the path of every labelled origin in decreasing density
    order and pseudo-labels the still-unlabelled nodes it crosses, removing
    them from the pool. Phase 2 walks the path of every remaining unlabelled
    origin and, if the path crosses any ground-truth node, labels the origin.

    `label_source` picks which labelled node on a path donates its label:
    "max_density" takes the highest-density ground-truth node (paths ascend,
    so the last one), "origin" the first ground-truth node in path order
    (in phase 1 that is the origin itself). Stale pseudo-labels on the
    unlabelled indices are discarded before propagation; ground-truth
    entries are never touched.
    """
    if label_source not in LABEL_SOURCE_POLICIES:
        raise ValueError(f"unknown label_source {label_source!r}")
    features = np.asarray(features, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    labelled = np.asarray(labelled, dtype=np.int64)
    unlabelled = np.asarray(unlabelled, dtype=np.int64)
    m = bank.size
    combined = np.concatenate([labelled, unlabelled])
    if np.intersect1d(labelled, unlabelled).size:
        raise ValueError("labelled and unlabelled sets overlap")
    if not np.array_equal(np.sort(combined), np.arange(m)):
        raise ValueError("labelled and unlabelled must partition the sample set")
    if np.any(bank.kinds[labelled] != GROUND_TRUTH):
        raise ValueError("labelled indices must be ground truth in the bank")
    if np.any(bank.kinds[unlabelled] == GROUND_TRUTH):
        raise ValueError("unlabelled indices must not be ground truth")

    out = bank.copy()
    out.clear_pseudo(unlabelled)
    is_gt = out.kinds == GROUND_TRUTH
    succ, dist = successor_table(features, densities)
    pool = np.zeros(m, dtype=bool)
    pool[unlabelled] = True

    def donor(path_nodes: list[int]) -> int | None:
        gts = [j for j in path_nodes if is_gt[j]]
        if not gts:
            return None
        return gts[-1] if label_source == "max_density" else gts[0]

    # Phase 1: labelled origins, densest first (ties toward smaller index).
    order = np.lexsort((labelled, -densities[labelled]))
    for i in labelled[order]:
        path = follow_successors(int(i), succ, dist, sigma, l_max)
        src = donor(path)
        label = int(out.labels[src])
        for j in path:
            if pool[j]:
                out.set_pseudo(j, label)
                pool[j] = False

    # Phase 2: remaining unlabelled origins, ascending index.
    for i in np.flatnonzero(pool):
        path = follow_successors(int(i), succ, dist, sigma, l_max)
        src = donor(path)
        if src is not None:
            out.set_pseudo(int(i), int(out.labels[src]))
    return out


def path_length_histogram(
    features: np.ndarray,
    densities: np.ndarray,
    sigma: float,
    l_max: int,
) -> dict[int, int]:
    """Histogram {length: count} of path lengths over every origin."""
    succ, dist = successor_table(features, densities)
    m = np.asarray(features).shape[0]
    lengths = [len(follow_successors(u, succ, dist, sigma, l_max)) for u in range(m)]
    counts = np.bincount(lengths)
    return {length: int(c) for length, c in enumerate(counts) if c > 0}


def save_histogram(hist: dict[int, int], path: str | Path) -> None:
    """Export as ``length,count`` lines, ascending length."""
    with open(path, "w") as fh:
        for length in sorted(hist):
            fh.write(f"{length},{hist[length]}\n")
