"""
Comparison methods: preferential attachment and first/second-order
proximity embeddings trained by edge sampling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .embedding import LR_FLOOR, EmbeddingMatrix, TrainingDiverged, init_vectors
from .graph import BipartiteGraph, EmptyGraphError


def pa_score(graph: BipartiteGraph, d: int, m: int) -> float:
    """``deg(d) * deg(m) / (2 |E|)``."""
    if not (0 <= d < graph.n_devices and 0 <= m < graph.n_apps):
        raise IndexError(f"pair ({d}, {m}) out of range")
    return float(graph.device_degrees[d]) * float(graph.app_degrees[m]) / (2.0 * graph.n_edges)


@dataclass
class PAScoreTable:
    devices: np.ndarray
    apps: np.ndarray
    scores: np.ndarray
    normalizer: int

    def write_csv(self, path: str | Path, graph: BipartiteGraph | None = None) -> None:
        with open(path, "w") as fh:
            fh.write("device,app,score\n")
            for d, m, s in zip(self.devices.tolist(), self.apps.tolist(), self.scores.tolist()):
                if graph is not None:
                    d = graph.device_tokens[d] if d >= 0 else "?"
                    m = graph.app_tokens[m] if m >= 0 else "?"
                fh.write(f"{d},{m},{s!r}\n")


def pa_scores(graph: BipartiteGraph, devices, apps) -> PAScoreTable:
    """Vectorized scores for candidate pairs; index ``-1`` (unseen vertex) has degree 0."""
    devices = np.asarray(devices, dtype=np.int64)
    apps = np.asarray(apps, dtype=np.int64)
    dd = np.where(devices >= 0, graph.device_degrees[np.maximum(devices, 0)], 0).astype(np.float64)
    md = np.where(apps >= 0, graph.app_degrees[np.maximum(apps, 0)], 0).astype(np.float64)
    return PAScoreTable(devices, apps, dd * md / (2.0 * graph.n_edges), 2 * graph.n_edges)


@dataclass
class LineConfig:
    d: int = 128
    neg_samples: int = 5
    learning_rate: float = 0.025
    epochs: int = 50
    workers: int = 1
    seed: int = 0
    init_scale: float = 0.5

    def validate(self) -> None:
        for name in ("d", "neg_samples", "epochs", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _arcs(graph: BipartiteGraph):
    """Both directions of every edge in unified ids, with the negative range
    (the target's side) of each arc."""
    d, m = graph.edges()
    nd, nv = graph.n_devices, graph.n_vertices
    src = np.concatenate([d, m + nd])
    dst = np.concatenate([m + nd, d])
    k = d.shape[0]
    neg_lo = np.concatenate([np.full(k, nd), np.zeros(k, dtype=np.int64)])
    neg_hi = np.concatenate([np.full(k, nv), np.full(k, nd)])
    return src, dst, neg_lo, neg_hi


def _train_line(graph: BipartiteGraph, config: LineConfig, second_order: bool) -> EmbeddingMatrix:
    config = config or LineConfig()
    config.validate()
    if graph.n_edges == 0:
        raise EmptyGraphError("empty graph")
    emb = init_vectors(graph.n_vertices, config.d, config.init_scale, config.seed)
    # context vectors start at zero, as in word2vec-style trainers
    ctx = np.zeros_like(emb) if second_order else np.zeros((1, config.d))
    src, dst, neg_lo, neg_hi = _arcs(graph)
    if config.workers > 1:
        from numba import config as nb_config, set_num_threads

        set_num_threads(min(config.workers, nb_config.NUMBA_NUM_THREADS))
    history = []
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(src.shape[0])
        loss = _kernels.line_epoch(
            emb, ctx, src[perm], dst[perm], config.workers,
            config.neg_samples, neg_lo[perm], neg_hi[perm],
            config.learning_rate, LR_FLOOR, epoch, config.epochs, np.uint64(config.seed), second_order,
        )
        if not np.isfinite(loss) or not np.isfinite(emb).all():
            raise TrainingDiverged(f"non-finite embedding in epoch {epoch}")
        history.append(loss / src.shape[0])
    meta = {
        "method": "second_order" if second_order else "first_order",
        "config": config.to_dict(),
        "graph_hash": graph.content_hash(),
        "loss_history": history,
    }
    return EmbeddingMatrix(emb, graph.n_devices, graph.n_apps, meta)


def train_first_order(graph: BipartiteGraph, config: LineConfig | None = None) -> EmbeddingMatrix:
    """Shared vectors for both ends of an edge: ``log sigma(u . v)`` on edges,
    ``log sigma(-u . v')`` on uniform negatives from the opposite side."""
    return _train_line(graph, config, second_order=False)


def train_second_order(graph: BipartiteGraph, config: LineConfig | None = None) -> EmbeddingMatrix:
    """Vertex vectors predict neighbors' context vectors; scoring and features
    use the vertex (target) vectors only."""
    return _train_line(graph, config, second_order=True)
