"""Command-line surface: dataset generation, training, evaluation, and the
standalone exports (densities, path histograms, pseudo-labels, gradient
check, ablation grid).

Exit status: 0 success, 2 usage error, 3 data/format error, 4 numeric check
failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ablation, dataio, dplp, gradcheck, model, trainer
from .graph import build_knn_graph, load_densities, save_densities

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dagssl",
        description="Density-aware graph semi-supervised learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("blobs", "rings"), required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, default=2, help="feature dimension (blobs)")
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05, help="radial noise (rings)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--labels-per-class", type=int, default=None,
                   help="carve a split from a fully labelled file")
    p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--test-features", required=True)
    p.add_argument("--test-labels", required=True)

    p = sub.add_parser("propagate", help="run label propagation standalone")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output pseudo-label file")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--sigma", type=float, default=None,
                   help="absolute threshold (default: 0.9 quantile of 1-NN distances)")
    p.add_argument("--l-max", type=int, default=64)
    p.add_argument("--label-source", choices=dplp.LABEL_SOURCE_POLICIES,
                   default="max_density")

    p = sub.add_parser("density", help="export per-node densities")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=64)

    p = sub.add_parser("paths", help="export the path-length histogram")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--l-max", type=int, default=64)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)

    p = sub.add_parser("ablate", help="run the 4-cell ablation grid")
    p.add_argument("--out", required=True, help="output table file")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")

    return parser


def _resolve_sigma_flag(features: np.ndarray, sigma: float | None) -> float:
    if sigma is not None:
        if sigma <= 0.0:
            raise dataio.FormatError("--sigma must be positive")
        return sigma
    return float(np.quantile(dplp.nn_distances(features), 0.9))


def _cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "blobs":
        features, labels = dataio.gen_blobs(
            args.classes, args.per_class, args.dim,
            args.separation, args.spread, args.seed,
        )
    else:
        features, labels = dataio.gen_rings(
            args.classes, args.per_class, args.noise, args.seed
        )
    dataio.save_matrix(features, out / "features.dagf")
    dataio.save_labels(labels, out / "labels.txt")
    print(f"wrote {features.shape[0]}x{features.shape[1]} features and labels to {out}")
    return EXIT_OK


def _load_dataset(features_path: str, labels_path: str):
    features = dataio.load_matrix(features_path)
    labels = dataio.load_labels(labels_path, features.shape[0])
    return features, labels


def _cmd_train(args) -> int:
    features, labels = _load_dataset(args.features, args.labels)
    config = trainer.load_config(args.config)
    true_labels = None
    if args.labels_per_class is not None:
        if np.any(labels == dataio.UNLABELLED):
            raise dataio.FormatError(
                "--labels-per-class needs a fully labelled file"
            )
        n_classes = int(labels.max()) + 1
        spec = dataio.SplitSpec(args.labels_per_class, args.split_seed, n_classes)
        labelled, unlabelled = dataio.make_split(labels, spec)
        true_labels = labels.copy()
        labels = np.where(np.isin(np.arange(labels.shape[0]), labelled), labels, -1)
    else:
        labelled = np.flatnonzero(labels != dataio.UNLABELLED)
        unlabelled = np.flatnonzero(labels == dataio.UNLABELLED)
        if labelled.size == 0:
            raise dataio.FormatError("label file has no labelled entries")
    result = trainer.train(features, labels, labelled, unlabelled, config,
                           true_labels=true_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(result.mparams, result.dparams, out / "checkpoint.dagp")
    dataio.save_matrix(result.bank.matrix.astype(np.float32), out / "bank.dagf")
    save_densities(result.graph.densities, out / "densities.txt")
    dataio.save_labels(result.label_bank.to_label_array(), out / "pseudo_labels.txt")
    result.log.save(out / "runlog.jsonl")
    print(f"wrote checkpoint, bank, densities, pseudo-labels, and log to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    mparams, dparams = model.load_checkpoint(args.checkpoint)
    bank_matrix = dataio.load_matrix(args.bank)
    config = trainer.load_config(args.config)
    from .banks import FeatureBank

    bank = FeatureBank(bank_matrix)
    graph = build_knn_graph(bank.matrix, min(config.k_global, bank.size - 1))
    test_features, test_labels = _load_dataset(args.test_features, args.test_labels)
    metrics = trainer.evaluate(mparams, dparams, bank, graph,
                               test_features, test_labels, config)
    print(f"error_rate {metrics['error_rate']:.6f} "
          f"({metrics['n_correct']}/{metrics['n']} correct)")
    return EXIT_OK


def _cmd_propagate(args) -> int:
    features, labels = _load_dataset(args.features, args.labels)
    f64 = features.astype(np.float64)
    graph = build_knn_graph(f64, min(args.k, features.shape[0] - 1))
    sigma = _resolve_sigma_flag(f64, args.sigma)
    labelled = np.flatnonzero(labels != dataio.UNLABELLED)
    unlabelled = np.flatnonzero(labels == dataio.UNLABELLED)
    bank = dplp.LabelBank.from_ground_truth(features.shape[0], labelled, labels)
    out_bank = dplp.propagate(f64, graph.densities, bank, labelled, unlabelled,
                              sigma, args.l_max, args.label_source)
    dataio.save_labels(out_bank.to_label_array(), args.out)
    n_pseudo = int((out_bank.kinds == dplp.PSEUDO).sum())
    print(f"assigned {n_pseudo} pseudo-labels (sigma={sigma:.6g}); wrote {args.out}")
    return EXIT_OK


def _cmd_density(args) -> int:
    features = dataio.load_matrix(args.features)
    graph = build_knn_graph(features.astype(np.float64),
                            min(args.k, features.shape[0] - 1))
    save_densities(graph.densities, args.out)
    print(f"wrote {features.shape[0]} densities to {args.out}")
    return EXIT_OK


def _cmd_paths(args) -> int:
    features = dataio.load_matrix(args.features)
    f64 = features.astype(np.float64)
    graph = build_knn_graph(f64, min(args.k, features.shape[0] - 1))
    sigma = _resolve_sigma_flag(f64, args.sigma)
    hist = dplp.path_length_histogram(f64, graph.densities, sigma, args.l_max)
    dplp.save_histogram(hist, args.out)
    total = sum(hist.values())
    print(f"wrote histogram over {total} paths (sigma={sigma:.6g}) to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = gradcheck.run_gradcheck(seed=args.seed, instances=args.instances)
    print(f"checked {report.coordinates} partial derivatives over "
          f"{report.instances} instances in {report.elapsed_seconds:.1f}s")
    print(f"max relative error: {report.max_rel_error:.3e} "
          f"(tolerance {gradcheck.REL_TOL:.0e})")
    if not report.passed:
        print("gradient check FAILED")
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    seeds = list(range(args.seeds))
    results = ablation.run_grid(seeds)
    table = ablation.grid_table(results)
    Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


_HANDLERS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "propagate": _cmd_propagate,
    "density": _cmd_density,
    "paths": _cmd_paths,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (dataio.FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
