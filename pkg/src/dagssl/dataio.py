"""Dataset persistence, splits, and synthetic dataset generation.

Feature matrices are stored in the "DAGF" binary container: a 24-byte
little-endian header (4-byte magic, u32 version, u64 rows, u64 cols)
followed by float32 row-major payload. Label files are plain text with one
``index,label`` pair per line; label -1 marks an unlabelled sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

UNLABELLED = -1

MATRIX_MAGIC = b"DAGF"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class FormatError(ValueError):
    """Malformed or inconsistent data file."""


def validate_features(features: np.ndarray) -> np.ndarray:
    """Check feature-matrix invariants and return a C-contiguous float32 copy.

    Rejects empty matrices, non-finite values, and rows with zero norm
    (downstream cosine math divides by row norms).
    """
    arr = np.ascontiguousarray(features, dtype=np.float32)
    if arr.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise FormatError(f"feature matrix must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError("feature matrix contains non-finite values")
    norms = np.linalg.norm(arr.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise FormatError(f"feature row {bad} has zero norm")
    return arr


def save_matrix(features: np.ndarray, path: str | Path) -> None:
    """Write a feature matrix to `path` in the DAGF binary format."""
    arr = validate_features(features)
    rows, cols = arr.shape
    header = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, rows, cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4").tobytes())


def load_matrix(path: str | Path) -> np.ndarray:
    """Read a DAGF file back into a float32 matrix, verifying all invariants."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than header ({len(raw)} bytes)")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != MATRIX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + rows * cols * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, header implies {expected} bytes, "
            f"file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return validate_features(data.reshape(rows, cols))


def save_labels(labels: np.ndarray, path: str | Path) -> None:
    """Write labels as ``index,label`` lines; UNLABELLED entries as -1."""
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w") as fh:
        for i, lab in enumerate(labels):
            fh.write(f"{i},{int(lab)}\n")


def load_labels(path: str | Path, m: int) -> np.ndarray:
    """Parse a label file covering exactly the indices 0..m-1.

    Returns an int64 array of length m with UNLABELLED (-1) sentinels kept
    as-is. Duplicate, missing, or out-of-range indices are format errors.
    """
    labels = np.full(m, UNLABELLED, dtype=np.int64)
    seen = np.zeros(m, dtype=bool)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'index,label', got {line!r}")
            try:
                idx, lab = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: unparsable line {line!r}") from exc
            if not 0 <= idx < m:
                raise FormatError(f"{path}:{lineno}: index {idx} out of range [0, {m})")
            if seen[idx]:
                raise FormatError(f"{path}:{lineno}: duplicate index {idx}")
            if lab < UNLABELLED:
                raise FormatError(f"{path}:{lineno}: invalid label {lab}")
            seen[idx] = True
            labels[idx] = lab
    if not seen.all():
        missing = int(np.flatnonzero(~seen)[0])
        raise FormatError(f"{path}: index {missing} missing, coverage of [0, {m}) required")
    return labels


@dataclass(frozen=True)
class SplitSpec:
    """How to carve a labelled subset out of a fully labelled dataset."""

    labels_per_class: int
    seed: int
    class_count: int


def make_split(labels: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sample `labels_per_class` labelled indices per class, rest unlabelled.

    The result is an exact partition of [0, m): two sorted, disjoint index
    arrays. Deterministic in `spec.seed`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    m = labels.shape[0]
    if spec.labels_per_class < 1 or spec.class_count < 1:
        raise ValueError("labels_per_class and class_count must be positive")
    if spec.labels_per_class * spec.class_count > m:
        raise ValueError("split asks for more labelled samples than exist")
    if labels.min() < 0 or labels.max() >= spec.class_count:
        raise ValueError("labels outside [0, class_count) cannot be split")
    rng = np.random.default_rng(spec.seed)
    picks = []
    for c in range(spec.class_count):
        members = np.flatnonzero(labels == c)
        if members.size < spec.labels_per_class:
            raise ValueError(
                f"class {c} has {members.size} samples, "
                f"needs at least {spec.labels_per_class}"
            )
        picks.append(rng.choice(members, size=spec.labels_per_class, replace=False))
    labelled = np.sort(np.concatenate(picks))
    unlabelled = np.setdiff1d(np.arange(m, dtype=np.int64), labelled)
    return labelled, unlabelled


def gen_blobs(
    n_c: int,
    per_class: int,
    dim: int,
    separation: float,
    spread: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs, one per class, means at pairwise distance >= separation.

    Class means are drawn once and rescaled so their minimum pairwise
    distance equals `separation`. Labels come out sorted by class.
    """
    if n_c < 1 or per_class < 1 or dim < 1:
        raise ValueError("n_c, per_class, and dim must be positive")
    if spread <= 0.0:
        raise ValueError("spread must be positive")
    if separation < 0.0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_c, dim))
    if n_c > 1 and separation > 0.0:
        diffs = means[:, None, :] - means[None, :, :]
        dists = np.sqrt((diffs**2).sum(axis=2))
        dmin = dists[np.triu_indices(n_c, k=1)].min()
        if dmin == 0.0:
            raise ValueError("degenerate mean placement")
        means *= separation / dmin
    labels = np.repeat(np.arange(n_c, dtype=np.int64), per_class)
    points = means[labels] + spread * rng.normal(size=(n_c * per_class, dim))
    return validate_features(points), labels


def gen_rings(
    n_c: int, per_class: int, noise: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Concentric 2-D rings (class c at radius c+1) with radial Gaussian noise."""
    if n_c < 1 or per_class < 1:
        raise ValueError("n_c and per_class must be positive")
    if noise < 0.0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    chunks = []
    for c in range(n_c):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=per_class)
        radii = (c + 1.0) + noise * rng.standard_normal(per_class)
        chunks.append(np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1))
    labels = np.repeat(np.arange(n_c, dtype=np.int64), per_class)
    return validate_features(np.concatenate(chunks, axis=0)), labels
