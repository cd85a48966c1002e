"""Four-cell ablation harness on a synthetic blob benchmark.

Cells: "baseline" (no aggregation beyond the root affine, no propagation),
"dna" (aggregation only), "dplp" (propagation only), and "dag" (both). All
cells share the same data, split, warmup, and optimization budget; only the
two module switches differ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio, trainer

CELLS = ("baseline", "dna", "dplp", "dag")

BENCH_CLASSES = 4
BENCH_DIM = 32
BENCH_TRAIN_PER_CLASS = 500
BENCH_TEST_PER_CLASS = 250
BENCH_LABELS_PER_CLASS = 10
BENCH_SEPARATION = 5.0
BENCH_SPREAD = 1.0


@dataclass
class Benchmark:
    train_features: np.ndarray
    train_labels: np.ndarray
    test_features: np.ndarray
    test_labels: np.ndarray
    labelled: np.ndarray
    unlabelled: np.ndarray


def make_benchmark(seed: int) -> Benchmark:
    """Blobs with shared class means: first 500/class train, last 250/class test."""
    per_class = BENCH_TRAIN_PER_CLASS + BENCH_TEST_PER_CLASS
    features, labels = dataio.gen_blobs(
        BENCH_CLASSES, per_class, BENCH_DIM,
        separation=BENCH_SEPARATION, spread=BENCH_SPREAD, seed=seed,
    )
    train_rows, test_rows = [], []
    for c in range(BENCH_CLASSES):
        members = np.flatnonzero(labels == c)
        train_rows.append(members[:BENCH_TRAIN_PER_CLASS])
        test_rows.append(members[BENCH_TRAIN_PER_CLASS:])
    train_rows = np.concatenate(train_rows)
    test_rows = np.concatenate(test_rows)
    train_labels = labels[train_rows]
    labelled, unlabelled = dataio.make_split(
        train_labels,
        dataio.SplitSpec(BENCH_LABELS_PER_CLASS, seed=seed, class_count=BENCH_CLASSES),
    )
    return Benchmark(
        features[train_rows], train_labels,
        features[test_rows], labels[test_rows],
        labelled, unlabelled,
    )


def base_config(seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        k_global=64,
        k_sub=8,
        h=1,
        density_aware=True,
        dplp_enabled=True,
        sigma_policy="quantile",
        sigma_value=0.9,
        lam=0.2,
        warmup_epochs=15,
        epochs=12,
        iters_per_epoch=16,
        batch_size=64,
        lr=0.08,
        lr_milestones=(8,),
        lr_decay=0.1,
        momentum=0.9,
        backbone_depth=1,
        embed_dim=16,
        seed=seed,
    )


def cell_config(cell: str, seed: int) -> trainer.TrainConfig:
    config = base_config(seed)
    if cell == "baseline":
        config.h = 0
        config.dplp_enabled = False
    elif cell == "dna":
        config.dplp_enabled = False
    elif cell == "dplp":
        config.h = 0
    elif cell != "dag":
        raise ValueError(f"unknown cell {cell!r}")
    config.validate()
    return config


def run_cell(cell: str, seed: int, bench: Benchmark | None = None) -> float:
    """Train one cell on the benchmark for one seed; returns test error."""
    if bench is None:
        bench = make_benchmark(seed)
    config = cell_config(cell, seed)
    labels = np.where(
        np.isin(np.arange(bench.train_labels.shape[0]), bench.labelled),
        bench.train_labels, -1,
    )
    result = trainer.train(
        bench.train_features, labels, bench.labelled, bench.unlabelled, config,
        true_labels=bench.train_labels,
    )
    metrics = trainer.evaluate(
        result.mparams, result.dparams, result.bank, result.graph,
        bench.test_features, bench.test_labels, config,
    )
    return metrics["error_rate"]


def run_grid(seeds: list[int]) -> dict[str, list[float]]:
    """All four cells over the given seeds; {cell: [error per seed]}."""
    results: dict[str, list[float]] = {cell: [] for cell in CELLS}
    for seed in seeds:
        bench = make_benchmark(seed)
        for cell in CELLS:
            results[cell].append(run_cell(cell, seed, bench))
    return results


def grid_table(results: dict[str, list[float]]) -> str:
    lines = ["cell,mean_error,errors"]
    for cell in CELLS:
        errs = results[cell]
        mean = sum(errs) / len(errs)
        lines.append(f"{cell},{mean:.6f}," + ";".join(f"{e:.6f}" for e in errs))
    return "\n".join(lines) + "\n"
