"""Density-aware neighborhood aggregation (DNA): forward and analytic backward.

Each aggregation step enhances a node's feature with an attention-weighted
sum of its children's features followed by an affine transform:

    out = W @ (f_node + sum_v a_v * value_v) + b

The attention logit for child v is the cosine similarity p_v between the
node's raw feature and the child's raw banked feature, optionally plus the
child's graph density rho_v. Weights are softmax-normalized. For numerical
stability the softmax shifts p and rho by their own maxima separately; this
also makes the density-aware weights reduce bitwise to the plain ones when
all densities are equal.

Aggregation runs leaves-to-root. Only the root carries a fresh (current
model) embedding, so only the root-level weights receive gradient through
the similarity; banked features and densities are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .subgraph import SubGraphTree


@dataclass
class DnaParams:
    """Per-hop-level affine parameters of the aggregation layer.

    `weights[d]`/`biases[d]` transform the aggregation performed by nodes at
    depth d (the root is depth 0). With `shared=True` a single set is reused
    at every depth.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    density_aware: bool = True
    shared: bool = False

    def __post_init__(self):
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                raise ValueError(f"aggregation weight must be square, got {w.shape}")
            if b.shape != (w.shape[0],):
                raise ValueError("bias dimension does not match weight")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("non-finite aggregation parameters")

    @property
    def n_levels(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0]

    def level(self, depth: int) -> int:
        """Parameter-set index used by aggregating nodes at `depth`."""
        if self.shared:
            return 0
        if depth >= self.n_levels:
            raise ValueError(f"no parameters for depth {depth} (have {self.n_levels})")
        return depth


def init_dna_params(
    dim: int,
    n_levels: int,
    density_aware: bool,
    rng: np.random.Generator,
    shared: bool = False,
    noise: float = 0.01,
) -> DnaParams:
    """Near-identity initialization: W = I + U(-noise, noise), b = 0.

    Starts the layer as an approximate residual pass-through so early
    training matches a plain classifier.
    """
    stored = 1 if shared else max(1, n_levels)
    ws = [np.eye(dim) + rng.uniform(-noise, noise, size=(dim, dim)) for _ in range(stored)]
    bs = [np.zeros(dim) for _ in range(stored)]
    return DnaParams(ws, bs, density_aware=density_aware, shared=shared)


def similarity(f_u: np.ndarray, f_v: np.ndarray) -> float:
    """Cosine similarity between two nonzero vectors."""
    f_u = np.asarray(f_u, dtype=np.float64)
    f_v = np.asarray(f_v, dtype=np.float64)
    nu, nv = np.linalg.norm(f_u), np.linalg.norm(f_v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("similarity undefined for zero vectors")
    return float((f_u @ f_v) / (nu * nv))


def _shifted_softmax(p: np.ndarray, densities: np.ndarray | None) -> np.ndarray:
    # p and the density term are shifted by their own maxima before summing,
    # so equal densities cancel exactly and the plain path is recovered bitwise.
    t = p - p.max()
    if densities is not None:
        t = t + (densities - densities.max())
    e = np.exp(t)
    return e / e.sum()


def aggregation_weights(
    f_u: np.ndarray,
    neighbors: np.ndarray,
    densities: np.ndarray | None,
    density_aware: bool,
) -> np.ndarray:
    """Softmax attention weights of `f_u` over neighbor rows.

    Logits are cosine similarities, plus the neighbor densities when
    `density_aware`. Always a proper distribution (positive, sums to 1).
    """
    f_u = np.asarray(f_u, dtype=np.float64).reshape(-1)
    nbrs = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if nbrs.shape[0] == 0:
        raise ValueError("need at least one neighbor")
    nu = np.linalg.norm(f_u)
    nn = np.linalg.norm(nbrs, axis=1)
    if nu == 0.0 or np.any(nn == 0.0):
        raise ValueError("zero-norm vector in weight computation")
    p = (nbrs @ f_u) / (nn * nu)
    if density_aware:
        if densities is None:
            raise ValueError("density_aware weights need neighbor densities")
        rho = np.asarray(densities, dtype=np.float64).reshape(-1)
        if rho.shape[0] != nbrs.shape[0]:
            raise ValueError("density count does not match neighbor count")
        return _shifted_softmax(p, rho)
    return _shifted_softmax(p, None)


def aggregate(
    f_u: np.ndarray,
    neighbor_feats: np.ndarray,
    weights: np.ndarray,
    w_a: np.ndarray,
    b_a: np.ndarray,
) -> np.ndarray:
    """One aggregation step: W_A @ (f_u + weights @ neighbor_feats) + b_A."""
    f_u = np.asarray(f_u, dtype=np.float64).reshape(-1)
    feats = np.atleast_2d(np.asarray(neighbor_feats, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != feats.shape[0]:
        raise ValueError("weight count does not match neighbor count")
    return w_a @ (f_u + weights @ feats) + b_a


@dataclass
class _AggUnit:
    # One aggregation step, cached for the backward pass.
    depth: int  # depth of the aggregating node (0 = root)
    pos: int  # position of the node within its level
    param_level: int  # parameter-set index used
    child_positions: np.ndarray  # positions of children in level depth+1
    weights: np.ndarray  # (c,)
    child_values: np.ndarray  # (c, dim) values fed into the weighted sum
    z: np.ndarray  # f_node + weights @ child_values


@dataclass
class AggregationRecord:
    """Everything dna_backward needs, captured during dna_forward."""

    tree: SubGraphTree
    params: DnaParams
    units: list[_AggUnit] = field(default_factory=list)
    out: np.ndarray | None = None
    # Root-side quantities for the softmax Jacobian through the fresh feature.
    root_norm: float = 0.0
    root_unit_normed: np.ndarray | None = None  # f_u / ||f_u||
    child_normed: np.ndarray | None = None  # level-1 raw features, normalized


def dna_forward(
    tree: SubGraphTree,
    densities: np.ndarray,
    params: DnaParams,
) -> tuple[np.ndarray, AggregationRecord]:
    """Bottom-up aggregation over the sampled tree; returns the enhanced root.

    Nodes at depth d aggregate their depth-(d+1) children with level-d
    parameters; leaves contribute their raw banked features. A depth-0 tree
    degenerates to the root-level affine transform alone.
    """
    densities = np.asarray(densities, dtype=np.float64)
    if not params.shared and params.n_levels < max(1, tree.depth):
        raise ValueError(
            f"tree depth {tree.depth} needs {max(1, tree.depth)} parameter levels, "
            f"have {params.n_levels}"
        )
    record = AggregationRecord(tree=tree, params=params)
    # values[d] holds the upward value of each node at depth d (1-based levels).
    values: dict[int, np.ndarray] = {}
    for d in range(tree.depth, 0, -1):
        level = tree.levels[d - 1]
        if np.any(level.indices >= densities.shape[0]):
            raise ValueError("tree references a node with no density entry")
        if d == tree.depth:
            values[d] = level.features.copy()
            continue
        child_level = tree.levels[d]
        lvl = params.level(d)
        w_a, b_a = params.weights[lvl], params.biases[lvl]
        vals = np.empty_like(level.features)
        for pos in range(level.indices.shape[0]):
            child_pos = np.flatnonzero(child_level.parents == pos)
            if child_pos.size == 0:
                vals[pos] = level.features[pos]
                continue
            a = aggregation_weights(
                level.features[pos],
                child_level.features[child_pos],
                densities[child_level.indices[child_pos]],
                params.density_aware,
            )
            child_values = values[d + 1][child_pos]
            z = level.features[pos] + a @ child_values
            vals[pos] = w_a @ z + b_a
            record.units.append(
                _AggUnit(d, pos, lvl, child_pos, a, child_values, z)
            )
        values[d] = vals
    # Root aggregation (depth 0), with the fresh feature on the query side.
    lvl = params.level(0)
    w_a, b_a = params.weights[lvl], params.biases[lvl]
    f_u = tree.root_feature
    record.root_norm = float(np.linalg.norm(f_u))
    if record.root_norm == 0.0:
        raise ValueError("root feature has zero norm")
    record.root_unit_normed = f_u / record.root_norm
    if tree.depth == 0:
        z = f_u.astype(np.float64, copy=True)
        record.units.append(_AggUnit(0, 0, lvl, np.empty(0, np.int64),
                                     np.empty(0), np.empty((0, f_u.shape[0])), z))
    else:
        level1 = tree.levels[0]
        a = aggregation_weights(
            f_u, level1.features,
            densities[level1.indices], params.density_aware,
        )
        child_values = values[1]
        z = f_u + a @ child_values
        record.units.append(
            _AggUnit(0, 0, lvl, np.arange(level1.indices.shape[0]), a, child_values, z)
        )
        norms = np.linalg.norm(level1.features, axis=1)
        record.child_normed = level1.features / norms[:, None]
    out = w_a @ z + b_a
    record.out = out
    return out, record


def dna_backward(
    record: AggregationRecord,
    params: DnaParams,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Gradients of the enhanced root w.r.t. the fresh root feature and params.

    `grad_out` is the upstream gradient at the enhanced root embedding.
    Returns (grad_root_feature, (grad_W per stored level, grad_b per stored
    level)). Banked child features and densities receive no gradient; the
    root-level softmax Jacobian routes gradient from the weights back into
    the fresh root feature.
    """
    if record.params is not params:
        raise ValueError("stale record: parameters changed since the forward pass")
    grad_out = np.asarray(grad_out, dtype=np.float64).reshape(-1)
    grad_w = [np.zeros_like(w) for w in params.weights]
    grad_b = [np.zeros_like(b) for b in params.biases]
    grad_root = np.zeros_like(record.tree.root_feature, dtype=np.float64)
    # Upstream gradient per aggregated node value, keyed by (depth, pos).
    pending: dict[tuple[int, int], np.ndarray] = {(0, 0): grad_out}
    for unit in reversed(record.units):
        g = pending.pop((unit.depth, unit.pos), None)
        if g is None:
            continue  # no gradient reaches this unit
        w_a = params.weights[unit.param_level]
        grad_w[unit.param_level] += np.outer(g, unit.z)
        grad_b[unit.param_level] += g
        s = w_a.T @ g  # gradient at z
        if unit.depth == 0:
            grad_root += s
            if unit.child_positions.size:
                grad_a = unit.child_values @ s
                a = unit.weights
                grad_p = a * (grad_a - a @ grad_a)  # softmax Jacobian
                v = record.child_normed.T @ grad_p
                fu_hat = record.root_unit_normed
                grad_root += (v - fu_hat * (fu_hat @ v)) / record.root_norm
        # Children that were themselves aggregated get a_v * s.
        for slot, child_pos in enumerate(unit.child_positions):
            key = (unit.depth + 1, int(child_pos))
            contrib = unit.weights[slot] * s
            if key in pending:
                pending[key] += contrib
            else:
                pending[key] = contrib
    return grad_root, (grad_w, grad_b)
