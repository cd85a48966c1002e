"""Differentiable stand-in model: small affine backbone, softmax classifier,
supervised loss, entropy/balance regularizer, mixup, and the manual backward
pass that routes gradients through the aggregation layer.

Checkpoints use the "DAGP" binary container: little-endian header (magic,
u32 version, backbone depth, input dim, embed dim, class count, stored
aggregation levels, density-aware flag, shared flag) followed by float32
parameter payload in a fixed order (backbone W/b per layer, aggregation W/b
per stored level, classifier W, classifier b).
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dna

PROB_FLOOR = 1e-8

CHECKPOINT_MAGIC = b"DAGP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIIIIII")


@dataclass
class ModelParams:
    """Backbone (0-2 affine layers, ReLU between) and softmax classifier."""

    backbone_weights: list[np.ndarray]  # layer i: (out, in)
    backbone_biases: list[np.ndarray]
    classifier_weight: np.ndarray  # (n_c, d)
    classifier_bias: np.ndarray  # (n_c,)

    @property
    def depth(self) -> int:
        return len(self.backbone_weights)

    @property
    def embed_dim(self) -> int:
        return self.classifier_weight.shape[1]

    @property
    def input_dim(self) -> int:
        if self.depth == 0:
            return self.embed_dim
        return self.backbone_weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.classifier_weight.shape[0]


def init_model_params(
    input_dim: int,
    embed_dim: int,
    n_classes: int,
    depth: int,
    rng: np.random.Generator,
) -> ModelParams:
    if depth not in (0, 1, 2):
        raise ValueError(f"backbone depth must be 0, 1, or 2, got {depth}")
    if depth == 0 and input_dim != embed_dim:
        raise ValueError("depth-0 backbone is the identity, needs input_dim == embed_dim")
    ws, bs = [], []
    dims = [input_dim] + [embed_dim] * depth
    for i in range(depth):
        fan_in = dims[i]
        ws.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(dims[i + 1], fan_in)))
        bs.append(np.zeros(dims[i + 1]))
    cw = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(n_classes, embed_dim))
    return ModelParams(ws, bs, cw, np.zeros(n_classes))


def backbone_forward(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Map inputs (d_in,) or (n, d_in) to embeddings; ReLU between layers only,
    so the final embedding is unconstrained (graph math needs nonzero rows)."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.input_dim:
        raise ValueError(f"expected input dim {params.input_dim}, got {h.shape[-1]}")
    for i, (w, b) in enumerate(zip(params.backbone_weights, params.backbone_biases)):
        if i > 0:
            h = np.maximum(h, 0.0)
        h = h @ w.T + b
    return h


def _backbone_forward_cached(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, list[np.ndarray]]:
    # Cache each layer's input (post-ReLU of the previous layer) for backward.
    h = np.asarray(x, dtype=np.float64)
    inputs = []
    for i, (w, b) in enumerate(zip(params.backbone_weights, params.backbone_biases)):
        if i > 0:
            h = np.maximum(h, 0.0)
        inputs.append(h)
        h = h @ w.T + b
    return h, inputs


def classifier_forward(f: np.ndarray, params: ModelParams) -> np.ndarray:
    """Softmax class probabilities for embeddings (d,) or (n, d)."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != params.embed_dim:
        raise ValueError(f"expected embedding dim {params.embed_dim}, got {f.shape[-1]}")
    logits = f @ params.classifier_weight.T + params.classifier_bias
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def supervised_loss(probs: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log probability of the target classes (clamped logs)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != probs.shape[0]:
        raise ValueError("one target per probability row required")
    if np.any(targets < 0) or np.any(targets >= probs.shape[1]):
        raise ValueError("target class out of range")
    picked = probs[np.arange(targets.shape[0]), targets]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def regularizer(probs: np.ndarray) -> float:
    """Batch entropy term plus class-balance term, logs clamped at 1e-8.

    The entropy term is always >= 0; the balance term is >= ln(n_c) with
    equality exactly when the mean prediction is uniform.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[0] == 0:
        raise ValueError("regularizer needs a non-empty batch")
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    entropy_term = float(-(probs * logs).sum() / probs.shape[0])
    mean_pred = probs.mean(axis=0)
    balance_term = float(-np.log(np.maximum(mean_pred, PROB_FLOOR)).sum() / probs.shape[1])
    return entropy_term + balance_term


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    regularizer: float
    lam: float

    @property
    def total(self) -> float:
        return self.supervised + self.lam * self.regularizer


def batch_loss(
    probs: np.ndarray,
    targets: np.ndarray,
    target_weights: np.ndarray,
    lam: float,
) -> LossBreakdown:
    """Weighted supervised loss over rows with a target (-1 = no target),
    plus lam times the regularizer over the whole batch.

    The supervised term is sum(w_i * nll_i) / sum(w_i); rows without a
    target contribute only to the regularizer.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    weights = np.asarray(target_weights, dtype=np.float64).reshape(-1)
    mask = targets >= 0
    if mask.any():
        rows = np.flatnonzero(mask)
        picked = probs[rows, targets[rows]]
        nll = -np.log(np.maximum(picked, PROB_FLOOR))
        wsum = weights[rows].sum()
        sup = float((weights[rows] * nll).sum() / wsum) if wsum > 0 else 0.0
    else:
        sup = 0.0
    return LossBreakdown(supervised=sup, regularizer=regularizer(probs), lam=lam)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def mixup(
    batch_x: np.ndarray,
    batch_y: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Convex input/target mixing with a Beta(alpha, alpha) coefficient.

    Pairs each row with a seeded shuffle of the batch. `lam` can be pinned
    for testing. Returns (mixed_x, mixed_y, lam, permutation).
    """
    if alpha <= 0.0:
        raise ValueError("mixup alpha must be positive")
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(x.shape[0])
    mixed_x = lam * x + (1.0 - lam) * x[perm]
    mixed_y = lam * y + (1.0 - lam) * y[perm]
    return mixed_x, mixed_y, lam, perm


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

@dataclass
class SampleCache:
    """Per-sample activations captured by pipeline_forward."""

    backbone_inputs: list[np.ndarray]
    fresh: np.ndarray
    record: dna.AggregationRecord | None
    enhanced: np.ndarray


@dataclass
class GradientSet:
    """Gradients (or SGD velocities) shaped like (ModelParams, DnaParams)."""

    backbone_weights: list[np.ndarray]
    backbone_biases: list[np.ndarray]
    dna_weights: list[np.ndarray]
    dna_biases: list[np.ndarray]
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    @classmethod
    def zeros(cls, mparams: ModelParams, dparams: dna.DnaParams) -> "GradientSet":
        return cls(
            [np.zeros_like(w) for w in mparams.backbone_weights],
            [np.zeros_like(b) for b in mparams.backbone_biases],
            [np.zeros_like(w) for w in dparams.weights],
            [np.zeros_like(b) for b in dparams.biases],
            np.zeros_like(mparams.classifier_weight),
            np.zeros_like(mparams.classifier_bias),
        )


def pipeline_forward(
    x: np.ndarray,
    mparams: ModelParams,
    dparams: dna.DnaParams | None,
    tree,
    densities: np.ndarray | None,
) -> tuple[np.ndarray, SampleCache]:
    """Backbone -> (optional) aggregation for one sample; returns the
    enhanced embedding and the cache needed by model_backward.

    `tree` is a sampled sub-graph whose root feature is replaced by the
    current backbone output; pass tree=None to skip aggregation entirely.
    """
    fresh, bb_inputs = _backbone_forward_cached(x, mparams)
    if tree is None or dparams is None:
        return fresh, SampleCache(bb_inputs, fresh, None, fresh)
    live_tree = dataclasses.replace(tree, root_feature=fresh)
    enhanced, record = dna.dna_forward(live_tree, densities, dparams)
    return enhanced, SampleCache(bb_inputs, fresh, record, enhanced)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Gradient at the logits given the gradient at softmax outputs."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def loss_grad_probs(
    probs: np.ndarray,
    targets: np.ndarray,
    target_weights: np.ndarray,
    lam: float,
) -> np.ndarray:
    """d(batch_loss)/d(probs), matching batch_loss including the clamps."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    weights = np.asarray(target_weights, dtype=np.float64).reshape(-1)
    n, n_c = probs.shape
    grad = np.zeros_like(probs)
    mask = targets >= 0
    if mask.any():
        rows = np.flatnonzero(mask)
        wsum = weights[rows].sum()
        if wsum > 0:
            picked = probs[rows, targets[rows]]
            live = picked > PROB_FLOOR  # clamp kills the gradient below the floor
            g = np.where(live, -1.0 / np.maximum(picked, PROB_FLOOR), 0.0)
            grad[rows, targets[rows]] += weights[rows] * g / wsum
    if lam != 0.0:
        live = probs > PROB_FLOOR
        logs = np.log(np.maximum(probs, PROB_FLOOR))
        # entropy term: d/dp [-p log max(p, eps)] / n
        grad += lam * np.where(live, -(logs + 1.0), -logs) / n
        mean_pred = probs.mean(axis=0)
        live_mean = mean_pred > PROB_FLOOR
        g_mean = np.where(live_mean, -1.0 / (n_c * np.maximum(mean_pred, PROB_FLOOR)), 0.0)
        grad += lam * g_mean[None, :] / n
    return grad


def model_backward(
    caches: list[SampleCache],
    probs: np.ndarray,
    grad_probs: np.ndarray,
    mparams: ModelParams,
    dparams: dna.DnaParams,
) -> GradientSet:
    """Accumulate parameter gradients for a batch, in fixed sample order.

    Routes: loss -> softmax -> classifier -> aggregation (dna_backward) ->
    backbone. Banked neighbor features and densities are constants.
    """
    grads = GradientSet.zeros(mparams, dparams)
    grad_logits = softmax_backward(probs, grad_probs)
    enhanced = np.stack([c.enhanced for c in caches])
    grads.classifier_weight += grad_logits.T @ enhanced
    grads.classifier_bias += grad_logits.sum(axis=0)
    grad_enhanced = grad_logits @ mparams.classifier_weight
    for i, cache in enumerate(caches):
        if cache.record is not None:
            grad_fresh, (gw, gb) = dna.dna_backward(cache.record, dparams, grad_enhanced[i])
            for lvl in range(len(gw)):
                grads.dna_weights[lvl] += gw[lvl]
                grads.dna_biases[lvl] += gb[lvl]
        else:
            grad_fresh = grad_enhanced[i]
        g = grad_fresh
        for layer in range(mparams.depth - 1, -1, -1):
            inp = cache.backbone_inputs[layer]
            grads.backbone_weights[layer] += np.outer(g, inp)
            grads.backbone_biases[layer] += g
            if layer > 0:
                g = g @ mparams.backbone_weights[layer]
                g = g * (inp > 0.0)  # ReLU subgradient (0 at the kink)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(mparams: ModelParams, dparams: dna.DnaParams, path: str | Path) -> None:
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        mparams.depth,
        mparams.input_dim,
        mparams.embed_dim,
        mparams.n_classes,
        len(dparams.weights),
        1 if dparams.density_aware else 0,
        1 if dparams.shared else 0,
    )
    chunks = []
    for w, b in zip(mparams.backbone_weights, mparams.backbone_biases):
        chunks += [w, b]
    for w, b in zip(dparams.weights, dparams.biases):
        chunks += [w, b]
    chunks += [mparams.classifier_weight, mparams.classifier_bias]
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in chunks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dna.DnaParams]:
    from .dataio import FormatError

    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: file shorter than checkpoint header")
    (magic, version, depth, input_dim, embed_dim, n_classes,
     n_levels, density_aware, shared) = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = _CKPT_HEADER.size
    data = np.frombuffer(raw, dtype="<f4", offset=offset)
    shapes = []
    dims = [input_dim] + [embed_dim] * depth
    for i in range(depth):
        shapes += [(dims[i + 1], dims[i]), (dims[i + 1],)]
    for _ in range(n_levels):
        shapes += [(embed_dim, embed_dim), (embed_dim,)]
    shapes += [(n_classes, embed_dim), (n_classes,)]
    expected = sum(int(np.prod(s)) for s in shapes)
    if data.shape[0] != expected:
        raise FormatError(
            f"{path}: payload holds {data.shape[0]} values, header implies {expected}"
        )
    arrays = []
    pos = 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(data[pos:pos + size].astype(np.float64).reshape(s))
        pos += size
    bw = [arrays[2 * i] for i in range(depth)]
    bb = [arrays[2 * i + 1] for i in range(depth)]
    rest = arrays[2 * depth:]
    dw = [rest[2 * i] for i in range(n_levels)]
    db = [rest[2 * i + 1] for i in range(n_levels)]
    cw, cb = rest[2 * n_levels], rest[2 * n_levels + 1]
    mparams = ModelParams(bw, bb, cw, cb)
    dparams = dna.DnaParams(dw, db, density_aware=bool(density_aware), shared=bool(shared))
    return mparams, dparams
