"""Multi-layer graph extraction from multichannel signals with a graph-network classifier."""

from .analysis import consistency_score, graph_distance, representative_graph
from .data import SyntheticSpec, generate_synthetic
from .model import GraphClassifier, ModelConfig, model_forward
from .train import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "GraphClassifier",
    "ModelConfig",
    "SyntheticSpec",
    "TrainConfig",
    "consistency_score",
    "fit",
    "generate_synthetic",
    "graph_distance",
    "model_forward",
    "representative_graph",
]
