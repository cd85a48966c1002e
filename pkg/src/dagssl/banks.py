"""Per-sample embedding store with cached norms.

The bank holds one embedding row per training sample, refreshed once per
epoch from the current feature extractor. Cosine queries use the cached
normalized rows.
"""

from __future__ import annotations

import numpy as np


class FeatureBank:
    """Immutable snapshot of per-sample embeddings (raw + L2-normalized)."""

    def __init__(self, matrix: np.ndarray, epoch: int = 0):
        mat = np.ascontiguousarray(matrix, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] == 0:
            raise ValueError(f"bank matrix must be non-empty 2-D, got {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise ValueError("bank matrix contains non-finite values")
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            bad = int(np.flatnonzero(norms == 0.0)[0])
            raise ValueError(f"bank row {bad} has zero norm")
        self.matrix = mat
        self.norms = norms
        self.normalized = mat / norms[:, None]
        self.epoch = epoch

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]
