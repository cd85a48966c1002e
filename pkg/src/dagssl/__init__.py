"""Density-aware graph toolkit for semi-supervised learning on feature vectors.

Pipeline pieces: exact cosine k-NN graph with per-node density, neighborhood
tree sampling, density-aware attention aggregation with an analytic backward
pass, density-ascending-path label propagation, and a deterministic joint
training loop with a CLI.
"""

from .banks import FeatureBank
from .dataio import (
    SplitSpec,
    UNLABELLED,
    gen_blobs,
    gen_rings,
    load_labels,
    load_matrix,
    make_split,
    save_labels,
    save_matrix,
)
from .dna import DnaParams, aggregate, aggregation_weights, dna_backward, dna_forward, similarity
from .dplp import DensityPath, LabelBank, build_path, next_higher_density, propagate
from .graph import DensityGraph, build_knn_graph, compute_densities, l2_normalize
from .subgraph import SubGraphTree, query_neighbors, sample_subgraph
from .trainer import TrainConfig, evaluate, train, warmup

__version__ = "0.1.0"

__all__ = [
    "DensityGraph",
    "DensityPath",
    "DnaParams",
    "FeatureBank",
    "LabelBank",
    "SplitSpec",
    "SubGraphTree",
    "TrainConfig",
    "UNLABELLED",
    "aggregate",
    "aggregation_weights",
    "build_knn_graph",
    "build_path",
    "compute_densities",
    "dna_backward",
    "dna_forward",
    "evaluate",
    "gen_blobs",
    "gen_rings",
    "l2_normalize",
    "load_labels",
    "load_matrix",
    "make_split",
    "next_higher_density",
    "propagate",
    "query_neighbors",
    "sample_subgraph",
    "save_labels",
    "save_matrix",
    "similarity",
    "train",
    "warmup",
]
