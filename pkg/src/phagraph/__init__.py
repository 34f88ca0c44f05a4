"""Link prediction for device/app install graphs via truncated random walks."""

from .baselines import LineConfig, pa_score, pa_scores, train_first_order, train_second_order
from .embedding import EmbeddingMatrix, TrainerConfig, train
from .graph import BipartiteGraph, InstallEvent, build_graph, ingest_events, temporal_split
from .metrics import EvalReport, roc_and_metrics
from .synthetic import GeneratorConfig, generate, holdout_future_edges

__version__ = "0.1.0"

__all__ = [
    "BipartiteGraph",
    "EmbeddingMatrix",
    "EvalReport",
    "GeneratorConfig",
    "InstallEvent",
    "LineConfig",
    "TrainerConfig",
    "build_graph",
    "generate",
    "holdout_future_edges",
    "ingest_events",
    "pa_score",
    "pa_scores",
    "roc_and_metrics",
    "temporal_split",
    "train",
    "train_first_order",
    "train_second_order",
]
