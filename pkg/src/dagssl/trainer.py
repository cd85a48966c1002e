"""End-to-end training loop: warmup, per-epoch bank/graph refresh, label
propagation, sub-graph sampling with aggregation, and SGD updates.

Every source of randomness derives from the single config seed through
tagged generators, so a (dataset, split, config) triple fully determines
every logged number and the final checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dna, dplp, model
from .banks import FeatureBank
from .graph import DensityGraph, build_knn_graph
from .subgraph import sample_subgraph

# Seed stream tags (default_rng([seed, tag, ...])).
_SEED_INIT_MODEL = 0
_SEED_INIT_DNA = 1
_SEED_WARMUP = 2
_SEED_EPOCH = 3
_SEED_MIXUP = 4


@dataclass
class TrainConfig:
    """Every free hyperparameter of the training loop.

    `sigma_policy` is "quantile" (sigma_value is a quantile of the 1-NN
    distance distribution, recomputed each epoch) or "absolute" (sigma_value
    used directly). `iters_per_epoch` of None derives one pass over the
    current labelled pool.
    """

    k_global: int = 64
    k_sub: int = 8
    h: int = 1
    density_aware: bool = True
    dplp_enabled: bool = True
    label_source: str = "max_density"
    sigma_policy: str = "quantile"
    sigma_value: float = 0.9
    l_max: int = 64
    lam: float = 1.0
    pseudo_weight: float = 1.0
    include_unlabelled: bool = False
    mixup_enabled: bool = False
    mixup_alpha: float = 1.0
    warmup_epochs: int = 5
    epochs: int = 10
    iters_per_epoch: int | None = None
    batch_size: int = 64
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    backbone_depth: int = 1
    embed_dim: int = 16
    share_dna_params: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.k_global < 1 or self.k_sub < 1:
            raise ValueError("neighbor counts must be positive")
        if self.h < 0:
            raise ValueError("h must be >= 0")
        if self.h >= 2 and self.k_sub > self.k_global:
            raise ValueError("k_sub cannot exceed k_global when h >= 2")
        if self.label_source not in dplp.LABEL_SOURCE_POLICIES:
            raise ValueError(f"unknown label_source {self.label_source!r}")
        if self.sigma_policy not in ("quantile", "absolute"):
            raise ValueError(f"unknown sigma_policy {self.sigma_policy!r}")
        if self.sigma_policy == "quantile" and not 0.0 < self.sigma_value <= 1.0:
            raise ValueError("quantile sigma_value must be in (0, 1]")
        if self.sigma_policy == "absolute" and self.sigma_value <= 0.0:
            raise ValueError("absolute sigma_value must be positive")
        if self.l_max < 1:
            raise ValueError("l_max must be >= 1")
        if self.mixup_enabled and self.mixup_alpha <= 0.0:
            raise ValueError("mixup_alpha must be positive")
        if self.warmup_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.iters_per_epoch is not None and self.iters_per_epoch < 0:
            raise ValueError("iters_per_epoch must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be ascending")
        if self.backbone_depth not in (0, 1, 2):
            raise ValueError("backbone_depth must be 0, 1, or 2")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")


_LIST_FIELDS = {"lr_milestones"}
_OPTIONAL_INT_FIELDS = {"iters_per_epoch"}


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainConfig):
        value = getattr(config, f.name)
        if f.name in _LIST_FIELDS:
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    """Parse ``name = value`` lines (# comments allowed) into a TrainConfig."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'name = value'")
        name, raw = (part.strip() for part in line.split("=", 1))
        if name not in fields:
            raise ValueError(f"config line {lineno}: unknown field {name!r}")
        if name in _LIST_FIELDS:
            values[name] = tuple(int(v) for v in raw.split(",") if v.strip())
            continue
        if name in _OPTIONAL_INT_FIELDS and raw.lower() == "none":
            values[name] = None
            continue
        ftype = fields[name].type
        if ftype == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"config line {lineno}: boolean expected, got {raw!r}")
            values[name] = raw.lower() == "true"
        elif ftype == "int":
            values[name] = int(raw)
        elif ftype == "float":
            values[name] = float(raw)
        else:
            values[name] = raw
    config = TrainConfig(**values)
    config.validate()
    return config


def load_config(path: str | Path) -> TrainConfig:
    return config_from_text(Path(path).read_text())


@dataclass
class RunLog:
    """Config echo plus one structured record per completed epoch."""

    config: dict
    records: list[dict] = field(default_factory=list)

    def lines(self) -> list[str]:
        head = json.dumps({"kind": "config", **self.config}, sort_keys=True)
        return [head] + [json.dumps({"kind": "epoch", **r}, sort_keys=True)
                         for r in self.records]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


@dataclass
class TrainState:
    mparams: model.ModelParams
    dparams: dna.DnaParams
    bank: FeatureBank
    graph: DensityGraph
    label_bank: dplp.LabelBank
    velocity: model.GradientSet
    features: np.ndarray  # (m, d_in) float64 inputs
    epoch: int = 0
    last_losses: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class TrainResult:
    mparams: model.ModelParams
    dparams: dna.DnaParams
    bank: FeatureBank
    graph: DensityGraph
    label_bank: dplp.LabelBank
    log: RunLog


def lr_at(config: TrainConfig, epoch: int) -> float:
    passed = sum(1 for ms in config.lr_milestones if epoch >= ms)
    return config.lr * (config.lr_decay**passed)


def resolve_sigma(bank_matrix: np.ndarray, config: TrainConfig) -> float:
    """Distance threshold for path growth under the configured policy."""
    if config.sigma_policy == "absolute":
        return config.sigma_value
    dists = dplp.nn_distances(bank_matrix)
    sigma = float(np.quantile(dists, config.sigma_value))
    if sigma <= 0.0:
        # Degenerate bank (duplicate rows); fall back to the largest 1-NN gap.
        sigma = float(dists.max()) or 1.0
    return sigma


def _sgd_step(
    mparams: model.ModelParams,
    dparams: dna.DnaParams,
    velocity: model.GradientSet,
    grads: model.GradientSet,
    lr: float,
    momentum: float,
) -> None:
    pairs = (
        list(zip(velocity.backbone_weights, grads.backbone_weights, mparams.backbone_weights))
        + list(zip(velocity.backbone_biases, grads.backbone_biases, mparams.backbone_biases))
        + list(zip(velocity.dna_weights, grads.dna_weights, dparams.weights))
        + list(zip(velocity.dna_biases, grads.dna_biases, dparams.biases))
        + [
            (velocity.classifier_weight, grads.classifier_weight, mparams.classifier_weight),
            (velocity.classifier_bias, grads.classifier_bias, mparams.classifier_bias),
        ]
    )
    for vel, grad, param in pairs:
        vel *= momentum
        vel -= lr * grad
        param += vel


def _batch_indices(pool: np.ndarray, n_iters: int, batch_size: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffled batches, cycling (with reshuffles) if iters need more."""
    batches = []
    perm = rng.permutation(pool)
    pos = 0
    for _ in range(n_iters):
        if pos + batch_size > perm.shape[0]:
            perm = rng.permutation(pool)
            pos = 0
        take = min(batch_size, perm.shape[0])
        batches.append(perm[pos:pos + take])
        pos += take
    return batches


def warmup(
    features: np.ndarray,
    labels: np.ndarray,
    labelled: np.ndarray,
    config: TrainConfig,
) -> model.ModelParams:
    """Supervised-only pre-training on the labelled subset (no aggregation,
    no propagation, no regularizer). warmup_epochs=0 returns the fresh
    initialization unchanged."""
    config.validate()
    labelled = np.asarray(labelled, dtype=np.int64)
    if labelled.size == 0:
        raise ValueError("warmup needs a non-empty labelled set")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels[labelled].max()) + 1
    mparams = model.init_model_params(
        features.shape[1], config.embed_dim, n_classes,
        config.backbone_depth, np.random.default_rng([config.seed, _SEED_INIT_MODEL]),
    )
    dummy_dna = dna.DnaParams([np.zeros((0, 0))], [np.zeros(0)])
    velocity = model.GradientSet.zeros(mparams, dummy_dna)
    mixup_rng = np.random.default_rng([config.seed, _SEED_MIXUP, 0])
    for epoch in range(config.warmup_epochs):
        rng = np.random.default_rng([config.seed, _SEED_WARMUP, epoch])
        n_iters = math.ceil(labelled.size / config.batch_size)
        for batch in _batch_indices(labelled, n_iters, config.batch_size, rng):
            x = features[batch]
            targets = labels[batch]
            if config.mixup_enabled:
                y = model.one_hot(targets, n_classes)
                x, y, _, _ = model.mixup(x, y, config.mixup_alpha, mixup_rng)
                embeddings, caches = _forward_plain(x, mparams)
                probs = model.classifier_forward(embeddings, mparams)
                grad_probs = _soft_target_grad(probs, y)
            else:
                embeddings, caches = _forward_plain(x, mparams)
                probs = model.classifier_forward(embeddings, mparams)
                grad_probs = model.loss_grad_probs(
                    probs, targets, np.ones(targets.shape[0]), lam=0.0
                )
            grads = model.model_backward(caches, probs, grad_probs, mparams, dummy_dna)
            _sgd_step(mparams, dummy_dna, velocity, grads, config.lr, config.momentum)
    return mparams


def _forward_plain(x: np.ndarray, mparams: model.ModelParams):
    caches = []
    outs = []
    for row in x:
        enhanced, cache = model.pipeline_forward(row, mparams, None, None, None)
        outs.append(enhanced)
        caches.append(cache)
    return np.stack(outs), caches


def _soft_target_grad(probs: np.ndarray, target_dist: np.ndarray) -> np.ndarray:
    # d/dp of mean_i [-sum_j y_ij log max(p_ij, floor)]
    n = probs.shape[0]
    live = probs > model.PROB_FLOOR
    return np.where(live, -target_dist / np.maximum(probs, model.PROB_FLOOR), 0.0) / n


def soft_supervised_loss(probs: np.ndarray, target_dist: np.ndarray) -> float:
    logs = np.log(np.maximum(probs, model.PROB_FLOOR))
    return float(-(target_dist * logs).sum(axis=1).mean())


def init_banks(
    mparams: model.ModelParams,
    features: np.ndarray,
    label_bank: dplp.LabelBank,
    epoch: int = 0,
) -> tuple[FeatureBank, dplp.LabelBank]:
    """Refresh the feature bank from the current backbone (pre-aggregation
    embeddings); the label bank passes through with ground truth intact."""
    emb = model.backbone_forward(np.asarray(features, dtype=np.float64), mparams)
    return FeatureBank(emb, epoch=epoch), label_bank


def train_epoch(state: TrainState, config: TrainConfig) -> TrainState:
    """One pass of the inner loop: sample sub-graphs, aggregate, classify,
    and update parameters for iters_per_epoch seeded batches."""
    label_bank = state.label_bank
    pool = np.flatnonzero(label_bank.labelled_mask())
    if config.include_unlabelled:
        pool = np.arange(label_bank.size, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("no samples carry a label; nothing to train on")
    n_iters = (config.iters_per_epoch if config.iters_per_epoch is not None
               else math.ceil(pool.size / config.batch_size))
    rng = np.random.default_rng([config.seed, _SEED_EPOCH, state.epoch])
    mixup_rng = np.random.default_rng([config.seed, _SEED_MIXUP, 1 + state.epoch])
    lr = lr_at(config, state.epoch)
    n_classes = state.mparams.n_classes
    sup_sum = reg_sum = tot_sum = 0.0
    weight_of = np.where(label_bank.kinds == dplp.PSEUDO, config.pseudo_weight, 1.0)
    for batch in _batch_indices(pool, n_iters, config.batch_size, rng):
        x = state.features[batch]
        targets = np.where(label_bank.labelled_mask()[batch],
                           label_bank.labels[batch], -1)
        weights = weight_of[batch]
        self_indices: list[int | None] = [int(i) for i in batch]
        soft_targets = None
        if config.mixup_enabled:
            y = np.zeros((batch.shape[0], n_classes))
            has = targets >= 0
            y[np.flatnonzero(has), targets[has]] = 1.0
            x, y_mix, lam_mix, perm = model.mixup(x, y, config.mixup_alpha, mixup_rng)
            # A mixed target is defined only when both endpoints had one.
            both = has & has[perm]
            targets = np.where(both, targets, -1)  # mask for the CE term
            soft_targets = np.where(both[:, None], y_mix, 0.0)
            self_indices = [None] * batch.shape[0]  # mixed rows are new points
        caches = []
        outs = []
        for r in range(batch.shape[0]):
            # h=0 still passes through the root-level affine transform.
            tree = sample_subgraph(
                model.backbone_forward(x[r], state.mparams),
                self_indices[r], state.bank, state.graph, config.k_sub, config.h,
            )
            enhanced, cache = model.pipeline_forward(
                x[r], state.mparams, state.dparams, tree, state.graph.densities,
            )
            outs.append(enhanced)
            caches.append(cache)
        probs = model.classifier_forward(np.stack(outs), state.mparams)
        if soft_targets is not None:
            ce_mask = targets >= 0
            if ce_mask.any():
                sup = soft_supervised_loss(probs[ce_mask], soft_targets[ce_mask])
            else:
                sup = 0.0
            breakdown = model.LossBreakdown(sup, model.regularizer(probs), config.lam)
            grad_probs = np.zeros_like(probs)
            if ce_mask.any():
                grad_probs[ce_mask] = _soft_target_grad(
                    probs[ce_mask], soft_targets[ce_mask]
                )
            grad_probs += model.loss_grad_probs(
                probs, np.full(batch.shape[0], -1), weights, config.lam
            )
        else:
            breakdown = model.batch_loss(probs, targets, weights, config.lam)
            grad_probs = model.loss_grad_probs(probs, targets, weights, config.lam)
        grads = model.model_backward(caches, probs, grad_probs,
                                     state.mparams, state.dparams)
        _sgd_step(state.mparams, state.dparams, state.velocity, grads,
                  lr, config.momentum)
        sup_sum += breakdown.supervised
        reg_sum += breakdown.regularizer
        tot_sum += breakdown.total
    denom = max(n_iters, 1)
    state.last_losses = (sup_sum / denom, reg_sum / denom, tot_sum / denom)
    return state


def train(
    features: np.ndarray,
    labels: np.ndarray,
    labelled: np.ndarray,
    unlabelled: np.ndarray,
    config: TrainConfig,
    true_labels: np.ndarray | None = None,
    test_features: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
) -> TrainResult:
    """Full run: warmup, then per epoch refresh banks, rebuild the graph,
    propagate labels, and train. The returned bank/graph are rebuilt from
    the final parameters so test-time retrieval sees current embeddings.

    `labels` needs valid entries at the labelled indices only. `true_labels`
    (when the caller knows them, e.g. synthetic data) enables pseudo-label
    accuracy logging; an optional test set adds a per-epoch error column.
    """
    config.validate()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    labelled = np.asarray(labelled, dtype=np.int64)
    unlabelled = np.asarray(unlabelled, dtype=np.int64)
    m = features.shape[0]
    if m <= config.k_global:
        raise ValueError(f"k_global={config.k_global} needs more than {m} samples")
    mparams = warmup(features, labels, labelled, config)
    dparams = dna.init_dna_params(
        config.embed_dim, max(1, config.h), config.density_aware,
        np.random.default_rng([config.seed, _SEED_INIT_DNA]),
        shared=config.share_dna_params,
    )
    label_bank = dplp.LabelBank.from_ground_truth(m, labelled, labels)
    velocity = model.GradientSet.zeros(mparams, dparams)
    log = RunLog(config=dataclasses.asdict(config))
    state = None
    for epoch in range(config.epochs):
        bank, label_bank = init_banks(mparams, features, label_bank, epoch=epoch)
        graph = build_knn_graph(bank.matrix, config.k_global)
        sigma = resolve_sigma(bank.matrix, config)
        if config.dplp_enabled:
            label_bank = dplp.propagate(
                bank.matrix, graph.densities, label_bank, labelled, unlabelled,
                sigma, config.l_max, config.label_source,
            )
        state = TrainState(mparams, dparams, bank, graph, label_bank,
                           velocity, features, epoch=epoch)
        state = train_epoch(state, config)
        record = {
            "epoch": epoch,
            "lr": lr_at(config, epoch),
            "sigma": sigma,
            "loss_supervised": state.last_losses[0],
            "loss_regularizer": state.last_losses[1],
            "loss_total": state.last_losses[2],
            "pseudo_count": int((label_bank.kinds == dplp.PSEUDO).sum()),
        }
        if true_labels is not None:
            pmask = label_bank.kinds == dplp.PSEUDO
            record["pseudo_accuracy"] = (
                float((label_bank.labels[pmask] == true_labels[pmask]).mean())
                if pmask.any() else None
            )
        else:
            record["pseudo_accuracy"] = None
        if test_features is not None and test_labels is not None:
            metrics = evaluate(mparams, dparams, bank, graph,
                               test_features, test_labels, config)
            record["test_error"] = metrics["error_rate"]
        else:
            record["test_error"] = None
        log.records.append(record)
    final_bank, label_bank = init_banks(mparams, features, label_bank,
                                        epoch=config.epochs)
    final_graph = build_knn_graph(final_bank.matrix, config.k_global)
    return TrainResult(mparams, dparams, final_bank, final_graph, label_bank, log)


def evaluate(
    mparams: model.ModelParams,
    dparams: dna.DnaParams,
    bank: FeatureBank,
    graph: DensityGraph,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    config: TrainConfig,
) -> dict:
    """Error rate on a test set, retrieving neighborhoods from the training
    bank (no self-exclusion: test samples are not bank members). Argmax ties
    break toward the smaller class id."""
    test_features = np.asarray(test_features, dtype=np.float64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if test_features.shape[0] == 0:
        raise ValueError("test set is empty; error rate undefined")
    if test_features.shape[0] != test_labels.shape[0]:
        raise ValueError("test features and labels disagree in length")
    embeddings = model.backbone_forward(test_features, mparams)
    outs = []
    for r in range(test_features.shape[0]):
        tree = sample_subgraph(embeddings[r], None, bank, graph,
                               config.k_sub, config.h)
        out, _ = dna.dna_forward(tree, graph.densities, dparams)
        outs.append(out)
    probs = model.classifier_forward(np.stack(outs), mparams)
    preds = probs.argmax(axis=1)  # first maximum = smallest class id
    n_correct = int((preds == test_labels).sum())
    n = test_features.shape[0]
    return {"error_rate": 1.0 - n_correct / n, "n": n, "n_correct": n_correct}
