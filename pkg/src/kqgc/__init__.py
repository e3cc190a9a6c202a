"""TransE pre-training smoothed by knowledge-query graph convolution."""

from .conv import (
    KqgcParams,
    LayerParams,
    LayerState,
    PairDataset,
    forward,
    init_params,
    train_kqgc,
)
from .graph import KnowledgeGraph, MessageEdge, Triple, build_message_graph, load_triples
from .transe import EmbeddingTable, TrainConfig, train_kge

__all__ = [
    "EmbeddingTable",
    "KnowledgeGraph",
    "KqgcParams",
    "LayerParams",
    "LayerState",
    "MessageEdge",
    "PairDataset",
    "TrainConfig",
    "Triple",
    "build_message_graph",
    "forward",
    "init_params",
    "load_triples",
    "train_kge",
    "train_kqgc",
]
