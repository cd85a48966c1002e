"""Finite-difference verification of the analytic backward pass.

Each instance freezes a sampled neighborhood tree (selection is piecewise
constant, so it stays fixed while parameters move), then compares the
analytic gradient of the full backbone -> aggregation -> classifier -> loss
pipeline against central differences for every parameter coordinate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import dna, model
from .banks import FeatureBank
from .graph import build_knn_graph
from .subgraph import sample_subgraph

REL_TOL = 1e-4
FD_STEP = 1e-5
# Coordinates below this scale are compared near-absolutely; keeps the ratio
# meaningful where the true derivative is ~0 by symmetry.
_SCALE_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    instances: int
    coordinates: int
    max_rel_error: float
    elapsed_seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def _param_arrays(mparams: model.ModelParams, dparams: dna.DnaParams) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    arrays += mparams.backbone_weights
    arrays += mparams.backbone_biases
    arrays += dparams.weights
    arrays += dparams.biases
    arrays += [mparams.classifier_weight, mparams.classifier_bias]
    return arrays


def _grad_arrays(grads: model.GradientSet) -> list[np.ndarray]:
    return (
        grads.backbone_weights + grads.backbone_biases
        + grads.dna_weights + grads.dna_biases
        + [grads.classifier_weight, grads.classifier_bias]
    )


def _pipeline_loss(x, trees, densities, targets, weights, lam, mparams, dparams):
    outs, caches = [], []
    for r in range(x.shape[0]):
        enhanced, cache = model.pipeline_forward(x[r], mparams, dparams,
                                                 trees[r], densities)
        outs.append(enhanced)
        caches.append(cache)
    probs = model.classifier_forward(np.stack(outs), mparams)
    loss = model.batch_loss(probs, targets, weights, lam)
    return loss.total, probs, caches


def _make_instance(rng: np.random.Generator, d: int, k_sub: int, h: int,
                   depth: int, n_classes: int, batch: int):
    bank_size = 24
    bank_feats = rng.normal(size=(bank_size, d))
    bank = FeatureBank(bank_feats)
    graph = build_knn_graph(bank_feats, k=max(k_sub, 4))
    mparams = model.init_model_params(d, d, n_classes, depth, rng)
    # Spread the classifier a little so probabilities are not uniform.
    mparams.classifier_weight += rng.normal(0.0, 0.3, size=(n_classes, d))
    dparams = dna.init_dna_params(d, max(1, h), density_aware=True, rng=rng)
    for w in dparams.weights:
        w += rng.normal(0.0, 0.05, size=w.shape)
    for _ in range(50):
        x = rng.normal(size=(batch, d))
        if depth < 2:
            break
        # Keep hidden pre-activations away from the ReLU kink so central
        # differences stay on one side of it.
        pre = x @ mparams.backbone_weights[0].T + mparams.backbone_biases[0]
        if np.abs(pre).min() > 1e-3:
            break
    trees = [
        sample_subgraph(model.backbone_forward(x[r], mparams), None, bank,
                        graph, k_sub, h)
        for r in range(batch)
    ]
    targets = rng.integers(0, n_classes, size=batch)
    targets[0] = -1  # one row exercises the regularizer-only path
    weights = np.where(rng.random(batch) < 0.5, 1.0, 0.7)
    return x, trees, graph.densities, targets, weights, mparams, dparams


def check_instance(seed: int, d: int = 16, k_sub: int = 4, h: int = 1,
                   lam: float = 0.7) -> tuple[float, int]:
    """Max relative error and coordinate count for one random instance."""
    rng = np.random.default_rng([seed, h])
    depth = 1 + seed % 2
    x, trees, densities, targets, weights, mparams, dparams = _make_instance(
        rng, d, k_sub, h, depth, n_classes=4, batch=2
    )
    _, probs, caches = _pipeline_loss(x, trees, densities, targets, weights,
                                      lam, mparams, dparams)
    grad_probs = model.loss_grad_probs(probs, targets, weights, lam)
    grads = model.model_backward(caches, probs, grad_probs, mparams, dparams)

    def loss_at() -> float:
        total, _, _ = _pipeline_loss(x, trees, densities, targets, weights,
                                     lam, mparams, dparams)
        return total

    worst = 0.0
    count = 0
    for arr, g_arr in zip(_param_arrays(mparams, dparams), _grad_arrays(grads)):
        flat = arr.reshape(-1)
        g_flat = g_arr.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_at()
            flat[i] = orig - FD_STEP
            down = loss_at()
            flat[i] = orig
            fd = (up - down) / (2.0 * FD_STEP)
            denom = max(abs(fd), abs(g_flat[i]), _SCALE_FLOOR)
            worst = max(worst, abs(fd - g_flat[i]) / denom)
            count += 1
    return worst, count


def run_gradcheck(seed: int = 0, instances: int = 100, d: int = 16,
                  k_sub: int = 4) -> GradCheckReport:
    """Check `instances` random pipelines, alternating tree depth 1 and 2."""
    start = time.perf_counter()
    worst = 0.0
    coords = 0
    for i in range(instances):
        err, n = check_instance(seed * 100003 + i, d=d, k_sub=k_sub, h=1 + i % 2)
        worst = max(worst, err)
        coords += n
    return GradCheckReport(
        instances=instances,
        coordinates=coords,
        max_rel_error=worst,
        elapsed_seconds=time.perf_counter() - start,
    )
