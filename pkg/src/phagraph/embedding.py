"""
Decay-weighted l-order proximity embedding for bipartite graphs.

Truncated random walks start at devices and step to a neighbor with
probability proportional to the neighbor's degree. The app at occurrence
rank ``l`` of a walk (position ``2l - 1``) forms a positive pair with the
start device, weighted by ``1/l``. Each pair is contrasted with uniformly
drawn apps through a gated log ranking loss and a squared L2 penalty,
optimized by lock-free parallel SGD.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import _kernels
from .graph import BipartiteGraph, EmptyGraphError

logger = logging.getLogger(__name__)

EMBEDDING_VERSION = "1"
EXACT_LIMIT = 5000
LR_FLOOR = 1e-4


class TrainingDiverged(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


class GraphTooLargeError(ValueError):
    pass


@dataclass
class TrainerConfig:
    d: int = 128
    K: int = 4
    walk_length: int = 6
    walks_per_vertex: int = 40
    neg_samples: int = 50
    margin_epsilon: float = 1.0
    margin_k: float | None = None
    reg_lambda: float = 1e-4
    learning_rate: float = 0.025
    epochs: int = 1
    workers: int = 1
    seed: int = 0
    # "edges": walk_length counts steps; "vertices": counts vertices incl. the start
    length_unit: str = "edges"
    # "degree": step weight deg(neighbor); "uniform": plain random walk
    kernel: str = "degree"
    init_scale: float = 0.5

    @property
    def threshold(self) -> float:
        k = self.neg_samples if self.margin_k is None else self.margin_k
        return self.margin_epsilon / k

    @property
    def n_steps(self) -> int:
        return self.walk_length if self.length_unit == "edges" else self.walk_length - 1

    @property
    def effective_order(self) -> int:
        """Highest rank actually reachable: apps sit at positions 1, 3, 5, ..."""
        return min(self.K, (self.n_steps + 1) // 2)

    def validate(self) -> list[str]:
        errs = []
        for name in ("d", "K", "walk_length", "neg_samples", "epochs", "workers"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.walks_per_vertex < 0:
            errs.append("walks_per_vertex must be >= 0")
        for name in ("margin_epsilon", "learning_rate", "init_scale"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        if self.reg_lambda < 0:
            errs.append("reg_lambda must be >= 0")
        if self.margin_k is not None and self.margin_k < 1:
            errs.append("margin_k must be >= 1")
        if self.length_unit not in ("edges", "vertices"):
            errs.append("length_unit must be 'edges' or 'vertices'")
        if self.kernel not in ("degree", "uniform"):
            errs.append("kernel must be 'degree' or 'uniform'")
        if errs:
            raise ConfigError("; ".join(errs))
        notes = []
        if self.walk_length < 2 * self.K:
            notes.append(
                f"walk_length={self.walk_length} ({self.length_unit}) < 2K={2 * self.K}: "
                f"apps are reachable only up to rank {self.effective_order}"
            )
        for note in notes:
            warnings.warn(note, stacklevel=3)
        return notes

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingMatrix:
    """Vertex vectors, devices first then apps, in graph index order."""

    vectors: np.ndarray
    n_devices: int
    n_apps: int
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def device(self, d) -> np.ndarray:
        return self.vectors[d]

    def app(self, m) -> np.ndarray:
        return self.vectors[self.n_devices + np.asarray(m)]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.vectors).all())

    def save(self, directory: str | Path, graph: BipartiteGraph) -> Path:
        """Write ``embeddings.tsv`` and ``embeddings.meta.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "embeddings.tsv", "w") as fh:
            for side, tokens, offset in (("D", graph.device_tokens, 0), ("M", graph.app_tokens, self.n_devices)):
                for i, tok in enumerate(tokens):
                    row = "\t".join(repr(float(x)) for x in self.vectors[offset + i])
                    fh.write(f"{side}\t{tok}\t{row}\n")
        meta = {"format_version": EMBEDDING_VERSION, "d": self.d, **self.meta}
        (directory / "embeddings.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path, graph: BipartiteGraph | None = None) -> "EmbeddingMatrix":
        directory = Path(directory)
        meta = json.loads((directory / "embeddings.meta.json").read_text())
        rows_d, rows_m, tok_d, tok_m = [], [], [], []
        with open(directory / "embeddings.tsv") as fh:
            for line in fh:
                side, tok, *vals = line.rstrip("\n").split("\t")
                (rows_d if side == "D" else rows_m).append([float(v) for v in vals])
                (tok_d if side == "D" else tok_m).append(tok)
        if graph is not None and (tok_d != graph.device_tokens or tok_m != graph.app_tokens):
            raise ValueError("embedding rows do not match the graph's vertex order")
        vectors = np.array(rows_d + rows_m, dtype=np.float64).reshape(len(tok_d) + len(tok_m), meta["d"])
        meta.pop("format_version", None)
        meta.pop("d", None)
        return cls(vectors, len(tok_d), len(tok_m), meta)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()


class Walk(NamedTuple):
    """Vertex sequence in unified ids (apps offset by ``n_devices``)."""

    vertices: np.ndarray
    n_devices: int

    def tokens(self, graph: BipartiteGraph) -> list[str]:
        nd = self.n_devices
        return [graph.device_tokens[v] if v < nd else graph.app_tokens[v - nd] for v in self.vertices.tolist()]


class Pair(NamedTuple):
    device: int
    app: int
    order: int
    weight: float


def step_weights(graph: BipartiteGraph, kernel: str = "degree") -> np.ndarray:
    """Running sum of neighbor weights along the unified CSR.

    A row's weights are recovered by differencing against the previous row's
    last entry, which is what the walk kernel does.
    """
    _, indices = graph.unified_csr()
    if kernel == "uniform":
        return np.arange(1, indices.shape[0] + 1, dtype=np.float64)
    return np.cumsum(graph.vertex_degrees()[indices].astype(np.float64))


def one_step_kernel(graph: BipartiteGraph, kernel: str = "degree") -> np.ndarray:
    """Dense transition matrix over unified vertex ids."""
    n = graph.n_vertices
    if n > EXACT_LIMIT:
        raise GraphTooLargeError(
            f"{n} vertices exceeds the dense limit {EXACT_LIMIT}; estimate by Monte Carlo with sample_walks"
        )
    indptr, indices = graph.unified_csr()
    rows = np.repeat(np.arange(n), np.diff(indptr))
    w = np.ones(indices.shape[0]) if kernel == "uniform" else graph.vertex_degrees()[indices].astype(np.float64)
    T = np.zeros((n, n))
    T[rows, indices] = w
    tot = T.sum(axis=1, keepdims=True)
    # isolated vertices keep an all-zero row
    np.divide(T, tot, out=T, where=tot > 0)
    return T


def exact_lorder_distribution(
    graph: BipartiteGraph, v_x: int, order: int, kernel: str = "degree", K: int | None = None
) -> np.ndarray:
    """Exact order-``order`` distribution from unified vertex ``v_x``.

    Built by composing the one-step kernel: ``P1 = T`` and
    ``P_l = T @ P_{l-1} @ T``. The result is restricted to the side opposite
    ``v_x``; it is all zeros when no walk of that length exists.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if K is not None and order > K:
        raise ValueError(f"order {order} exceeds K={K}")
    if not 0 <= v_x < graph.n_vertices:
        raise IndexError(f"vertex {v_x} out of range")
    T = one_step_kernel(graph, kernel)
    P = T
    for _ in range(order - 1):
        P = T @ P @ T
    row = P[v_x]
    nd = graph.n_devices
    return row[nd:].copy() if v_x < nd else row[:nd].copy()


def _walk_arrays(graph: BipartiteGraph, kernel: str):
    indptr, indices = graph.unified_csr()
    return indptr, indices, step_weights(graph, kernel), kernel == "degree"


def sample_walks(
    graph: BipartiteGraph, starts: np.ndarray, n_steps: int, seed: int, kernel: str = "degree", epoch: int = 0
) -> np.ndarray:
    """Sample one walk per start (unified ids); rows are padded with -1."""
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size and (starts.min() < 0 or starts.max() >= graph.n_vertices):
        raise IndexError("walk start out of range")
    indptr, indices, cumw, weighted = _walk_arrays(graph, kernel)
    return _kernels.sample_walks(starts, n_steps, indptr, indices, cumw, weighted, np.uint64(seed), epoch)


def sample_walk(
    graph: BipartiteGraph, start: int, length: int, rng: np.random.Generator, kernel: str = "degree"
) -> Walk:
    """One walk of ``length`` steps from device ``start``."""
    if not 0 <= start < graph.n_devices:
        raise IndexError(f"device {start} out of range")
    seed = int(rng.integers(0, 2**63))
    row = sample_walks(graph, np.array([start]), length, seed, kernel)[0]
    return Walk(row[row >= 0], graph.n_devices)


def extract_pairs(walk: Walk, K: int) -> list[Pair]:
    """Start device paired with the app at each occurrence rank ``l <= K``."""
    v = walk.vertices
    nd = walk.n_devices
    if v.shape[0] == 0 or v[0] >= nd:
        raise ValueError("walk must start at a device")
    pairs = []
    for order in range(1, K + 1):
        pos = 2 * order - 1
        if pos >= v.shape[0]:
            break
        pairs.append(Pair(int(v[0]), int(v[pos] - nd), order, 1.0 / order))
    return pairs


# ---------------------------------------------------------------------------
# ranking objective (reference implementation)
# ---------------------------------------------------------------------------


def ranking_loss(phi: np.ndarray, d: int, m: int, weight: float, negatives: np.ndarray, threshold: float, lam: float) -> float:
    """Loss of one stochastic term on unified row ids.

    ``weight * sum(log delta_j for active j) + lam * (|phi_d|^2 + |phi_m|^2 + sum_j |phi_j|^2)``
    with ``delta_j = phi_d . phi_j - phi_d . phi_m`` and active meaning
    ``delta_j > threshold``. Regularization counts each negative occurrence.
    """
    s_pos = phi[d] @ phi[m]
    delta = phi[negatives] @ phi[d] - s_pos
    active = delta > threshold
    rank = weight * np.log(np.minimum(delta[active], _kernels.CLAMP)).sum()
    reg = phi[d] @ phi[d] + phi[m] @ phi[m] + np.einsum("ij,ij->", phi[negatives], phi[negatives])
    return float(rank + lam * reg)


def ranking_gradient(phi, d, m, weight, negatives, threshold, lam):
    """Analytic gradient of :func:`ranking_loss` as ``{row: grad}``."""
    negatives = np.asarray(negatives)
    s_pos = phi[d] @ phi[m]
    delta = phi[negatives] @ phi[d] - s_pos
    if not np.all(np.isfinite(delta)):
        raise TrainingDiverged(f"non-finite score for device row {d}")
    active = delta > threshold
    g = np.zeros(negatives.shape[0])
    g[active] = weight / np.minimum(delta[active], _kernels.CLAMP)
    # clamped entries have zero slope
    g[active & (delta >= _kernels.CLAMP)] = 0.0
    grads: dict[int, np.ndarray] = {}

    def add(row, vec):
        grads[row] = grads[row] + vec if row in grads else vec.copy()

    add(d, 2 * lam * phi[d] + g @ (phi[negatives] - phi[m]))
    add(m, 2 * lam * phi[m] - g.sum() * phi[d])
    for j, r in enumerate(negatives.tolist()):
        add(r, 2 * lam * phi[r] + g[j] * phi[d])
    return grads


def ranking_step(emb: EmbeddingMatrix, pair: Pair, negatives, config: TrainerConfig, lr: float | None = None) -> float:
    """Apply one SGD step for ``pair`` against app-local ``negatives``.

    Only the device row, the positive app row and the negative rows change.
    Returns the loss before the update.
    """
    phi = emb.vectors
    nd = emb.n_devices
    negatives = nd + np.asarray(negatives, dtype=np.int64)
    d, m = pair.device, nd + pair.app
    args = (d, m, pair.weight, negatives, config.threshold, config.reg_lambda)
    grads = ranking_gradient(phi, *args)
    loss = ranking_loss(phi, *args)
    step = config.learning_rate if lr is None else lr
    for row, grad in grads.items():
        phi[row] -= step * grad
    return loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def init_vectors(n_rows: int, dim: int, scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale / np.sqrt(dim), scale / np.sqrt(dim), size=(n_rows, dim))


def walk_starts(graph: BipartiteGraph, walks_per_vertex: int, seed: int, epoch: int) -> np.ndarray:
    starts = np.repeat(np.arange(graph.n_devices, dtype=np.int64), walks_per_vertex)
    np.random.default_rng([seed, epoch]).shuffle(starts)
    return starts


def train(graph: BipartiteGraph, config: TrainerConfig | None = None, init: np.ndarray | None = None) -> EmbeddingMatrix:
    """Learn device and app vectors for ``graph``.

    ``workers=1`` is bit-reproducible for a fixed seed. With more workers the
    rows are updated concurrently without locks.
    """
    config = config or TrainerConfig()
    config.validate()
    if graph.n_devices == 0 or graph.n_edges == 0:
        raise EmptyGraphError("graph has no devices")
    phi = init_vectors(graph.n_vertices, config.d, config.init_scale, config.seed) if init is None else init.copy()
    indptr, indices, cumw, weighted = _walk_arrays(graph, config.kernel)
    if config.workers > 1:
        from numba import set_num_threads, config as nb_config

        set_num_threads(min(config.workers, nb_config.NUMBA_NUM_THREADS))

    history = []
    for epoch in range(config.epochs):
        if config.walks_per_vertex == 0:
            # no ranking terms: one gradient step on the L2 penalty alone
            lr = config.learning_rate - (config.learning_rate - LR_FLOOR) * epoch / config.epochs
            phi *= 1.0 - 2.0 * lr * config.reg_lambda
            history.append(float(config.reg_lambda * np.einsum("ij,ij->", phi, phi)))
            continue
        starts = walk_starts(graph, config.walks_per_vertex, config.seed, epoch)
        loss, n_pairs, bad = _kernels.train_epoch(
            phi, starts, config.workers,
            config.n_steps, config.K, graph.n_devices, graph.n_apps, config.neg_samples,
            config.threshold, config.reg_lambda, config.learning_rate, LR_FLOOR,
            epoch, config.epochs, np.uint64(config.seed),
            indptr, indices, cumw, weighted,
        )
        if bad >= 0 or not np.isfinite(phi).all():
            raise TrainingDiverged(
                f"non-finite score in epoch {epoch} (walk {bad}); lower learning_rate (now {config.learning_rate})"
            )
        history.append(loss / max(n_pairs, 1))
        logger.debug("epoch %d: %d pairs, mean loss %.5f", epoch, n_pairs, history[-1])

    meta = {
        "method": "full",
        "K": config.K,
        "config": config.to_dict(),
        "graph_hash": graph.content_hash(),
        "loss_history": history,
    }
    return EmbeddingMatrix(phi, graph.n_devices, graph.n_apps, meta)
