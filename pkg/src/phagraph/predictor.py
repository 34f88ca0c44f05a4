"""
Edge features, balanced labeled edge sets, classifiers and walk traces.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import joblib
import numpy as np

from .embedding import EmbeddingMatrix, sample_walks
from .graph import BipartiteGraph, TemporalSplit

MODEL_VERSION = "1"
COMBINERS = ("concat", "average", "hadamard", "weighted_l1", "weighted_l2")
CLASSIFIERS = ("tree_ensemble", "logistic", "gradient_boosting")
COLD_POLICIES = ("drop", "zero")


class SamplingError(ValueError):
    pass


class ContractError(ValueError):
    pass


class ClassifierError(ValueError):
    pass


def feature_dim(d: int, combiner: str) -> int:
    if combiner not in COMBINERS:
        raise ValueError(f"unknown combiner {combiner!r}; expected one of {COMBINERS}")
    return 2 * d if combiner == "concat" else d


def combine(a: np.ndarray, b: np.ndarray, combiner: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ContractError(f"row shapes differ: {a.shape} vs {b.shape}")
    if combiner == "concat":
        return np.concatenate([a, b], axis=-1)
    if combiner == "average":
        return (a + b) / 2.0
    if combiner == "hadamard":
        return a * b
    if combiner == "weighted_l1":
        return np.abs(a - b)
    if combiner == "weighted_l2":
        return (a - b) ** 2
    raise ValueError(f"unknown combiner {combiner!r}; expected one of {COMBINERS}")


def featurize_edge(emb: EmbeddingMatrix, d: int, m: int, combiner: str = "concat") -> np.ndarray:
    return combine(emb.device(d), emb.app(m), combiner)


def featurize(emb: EmbeddingMatrix, devices, apps, combiner: str = "concat") -> np.ndarray:
    """Feature rows for index pairs; index ``-1`` maps to a zero vector."""
    devices = np.asarray(devices, dtype=np.int64)
    apps = np.asarray(apps, dtype=np.int64)
    a = np.where((devices >= 0)[:, None], emb.vectors[np.maximum(devices, 0)], 0.0)
    b = np.where((apps >= 0)[:, None], emb.vectors[emb.n_devices + np.maximum(apps, 0)], 0.0)
    return combine(a, b, combiner)


def _keys(pairs, n_apps: int) -> np.ndarray:
    if isinstance(pairs, np.ndarray):
        return pairs.astype(np.int64)
    pairs = list(pairs)
    if not pairs:
        return np.empty(0, dtype=np.int64)
    arr = np.asarray(pairs, dtype=np.int64)
    return arr[:, 0] * n_apps + arr[:, 1]


def sample_negative_edges(
    graph: BipartiteGraph, count: int, exclusion: Iterable | np.ndarray = (), seed: int = 0
) -> np.ndarray:
    """Distinct uniform non-edges as a ``(count, 2)`` array of (device, app).

    ``exclusion`` holds extra forbidden pairs, either ``(d, m)`` tuples or
    keys ``d * n_apps + m``.
    """
    nd, nm = graph.n_devices, graph.n_apps
    forbidden = np.union1d(graph.edge_keys(), _keys(exclusion, nm))
    forbidden = forbidden[(forbidden >= 0) & (forbidden < nd * nm)]
    available = nd * nm - forbidden.shape[0]
    if count > available:
        raise SamplingError(f"requested {count} negatives but only {available} non-edges are available")
    if count <= 0:
        return np.empty((0, 2), dtype=np.int64)
    rng = np.random.default_rng(seed)
    chosen = np.empty(0, dtype=np.int64)
    if count > available // 2:
        # dense regime: enumerate the complement
        pool = np.setdiff1d(np.arange(nd * nm, dtype=np.int64), forbidden, assume_unique=True)
        chosen = rng.choice(pool, size=count, replace=False)
    else:
        seen = set()
        out = []
        while len(out) < count:
            batch = rng.integers(0, nd, size=2 * (count - len(out))) * nm + rng.integers(0, nm, size=2 * (count - len(out)))
            hit = np.isin(batch, forbidden)
            for key in batch[~hit].tolist():
                if key not in seen:
                    seen.add(key)
                    out.append(key)
                    if len(out) == count:
                        break
        chosen = np.asarray(out, dtype=np.int64)
    return np.column_stack([chosen // nm, chosen % nm])


@dataclass
class LabeledEdgeSet:
    """Candidate edges with labels; ``-1`` marks a vertex unseen in training."""

    devices: np.ndarray
    apps: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive

    def is_balanced(self) -> bool:
        return self.n_positive == self.n_negative

    def with_features(self, emb: EmbeddingMatrix, combiner: str) -> "LabeledEdgeSet":
        feats = featurize(emb, self.devices, self.apps, combiner)
        prov = {**self.provenance, "combiner": combiner, "embedding_graph_hash": emb.meta.get("graph_hash")}
        return LabeledEdgeSet(self.devices, self.apps, self.labels, feats, prov)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.devices, self.apps, self.labels):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()

    def write_csv(self, path: str | Path, graph: BipartiteGraph) -> None:
        with open(path, "w") as fh:
            fh.write("device,app,label\n")
            for d, m, y in zip(self.devices.tolist(), self.apps.tolist(), self.labels.tolist()):
                dt = graph.device_tokens[d] if d >= 0 else ""
                mt = graph.app_tokens[m] if m >= 0 else ""
                fh.write(f"{dt},{mt},{int(y)}\n")

    def write_features(self, path: str | Path, graph: BipartiteGraph) -> None:
        """Feature matrix in the embedding TSV convention, one row per edge."""
        if self.features is None:
            raise ValueError("edge set has no features")
        with open(path, "w") as fh:
            for d, m, row in zip(self.devices.tolist(), self.apps.tolist(), self.features):
                dt = graph.device_tokens[d] if d >= 0 else ""
                mt = graph.app_tokens[m] if m >= 0 else ""
                fh.write(f"E\t{dt}|{mt}\t" + "\t".join(repr(float(x)) for x in row) + "\n")


@dataclass
class EdgeSets:
    train: LabeledEdgeSet
    test: LabeledEdgeSet
    cold_test: LabeledEdgeSet | None
    info: dict


def _index_pairs(edges, graph: BipartiteGraph) -> tuple[np.ndarray, np.ndarray]:
    d = np.array([graph.device_index.get(e[0], -1) for e in edges], dtype=np.int64)
    m = np.array([graph.app_index.get(e[1], -1) for e in edges], dtype=np.int64)
    return d, m


def build_edge_sets(
    split: TemporalSplit, graph_train: BipartiteGraph, seed: int = 0, cold_policy: str = "drop"
) -> EdgeSets:
    """Balanced train/test candidates shared by every method.

    Negatives for both sets avoid all train and test positives, and the test
    negatives also avoid the train negatives. With ``cold_policy="drop"`` cold
    test edges go to ``cold_test`` (positives only, for separate reporting);
    with ``"zero"`` they stay in ``test`` with unseen endpoints set to ``-1``.
    """
    if cold_policy not in COLD_POLICIES:
        raise ValueError(f"cold_policy must be one of {COLD_POLICIES}")
    rng = np.random.default_rng(seed)
    s_train, s_test = rng.integers(0, 2**63, size=2)
    nm = graph_train.n_apps

    tr_d, tr_m = _index_pairs(split.train_edges, graph_train)
    keep = (tr_d >= 0) & (tr_m >= 0)
    tr_d, tr_m = tr_d[keep], tr_m[keep]
    te_d, te_m = _index_pairs(split.test_edges, graph_train)
    cold = (te_d < 0) | (te_m < 0)
    warm_keys = te_d[~cold] * nm + te_m[~cold]
    positives = np.union1d(tr_d * nm + tr_m, warm_keys)

    neg_tr = sample_negative_edges(graph_train, tr_d.shape[0], positives, seed=int(s_train))
    if cold_policy == "drop":
        pos_d, pos_m = te_d[~cold], te_m[~cold]
    else:
        pos_d, pos_m = te_d, te_m
    neg_te = sample_negative_edges(
        graph_train, pos_d.shape[0], np.union1d(positives, neg_tr[:, 0] * nm + neg_tr[:, 1]), seed=int(s_test)
    )

    def edge_set(pd, pm, neg, name):
        labels = np.r_[np.ones(pd.shape[0], dtype=np.int8), np.zeros(neg.shape[0], dtype=np.int8)]
        prov = {
            "set": name,
            "boundary": split.boundary,
            "horizon": split.horizon,
            "graph_hash": graph_train.content_hash(),
            "seed": seed,
        }
        return LabeledEdgeSet(np.r_[pd, neg[:, 0]], np.r_[pm, neg[:, 1]], labels, provenance=prov)

    train_set = edge_set(tr_d, tr_m, neg_tr, "train")
    test_set = edge_set(pos_d, pos_m, neg_te, "test")
    test_set.provenance["cold_policy"] = cold_policy
    test_set.provenance["n_cold"] = int(cold.sum())
    cold_set = None
    if cold.any():
        cold_set = LabeledEdgeSet(
            te_d[cold], te_m[cold], np.ones(int(cold.sum()), dtype=np.int8), provenance={"set": "cold_test"}
        )
    info = {"n_train_pos": int(tr_d.shape[0]), "n_test_pos": int(pos_d.shape[0]), "n_cold": int(cold.sum())}
    return EdgeSets(train_set, test_set, cold_set, info)


def build_datasets(
    emb: EmbeddingMatrix,
    split: TemporalSplit,
    graph_train: BipartiteGraph,
    combiner: str = "concat",
    seed: int = 0,
    cold_policy: str = "drop",
) -> tuple[LabeledEdgeSet, LabeledEdgeSet]:
    """Featurized balanced train and test sets."""
    graph_hash = graph_train.content_hash()
    if emb.meta.get("graph_hash") not in (None, graph_hash):
        raise ContractError("embedding was not trained on this training graph")
    sets = build_edge_sets(split, graph_train, seed, cold_policy)
    return sets.train.with_features(emb, combiner), sets.test.with_features(emb, combiner)


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------


def _make_estimator(kind: str, seed: int):
    if kind == "tree_ensemble":
        from sklearn.ensemble import RandomForestClassifier

        return RandomForestClassifier(
            n_estimators=20, max_depth=None, bootstrap=True, max_features="sqrt", random_state=seed, n_jobs=1
        )
    if kind == "logistic":
        from sklearn.linear_model import LogisticRegression
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        return make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
    if kind == "gradient_boosting":
        from sklearn.ensemble import HistGradientBoostingClassifier

        return HistGradientBoostingClassifier(random_state=seed, early_stopping=False)
    raise ValueError(f"unknown classifier kind {kind!r}; expected one of {CLASSIFIERS}")


@dataclass
class Classifier:
    kind: str
    combiner: str
    feature_dim: int
    seed: int
    estimator: object
    meta: dict = field(default_factory=dict)

    def score(self, features: np.ndarray) -> np.ndarray:
        if features.shape[0] == 0:
            return np.empty(0)
        if features.shape[1] != self.feature_dim:
            raise ContractError(f"expected {self.feature_dim} features, got {features.shape[1]}")
        return self.estimator.predict_proba(features)[:, 1]

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        joblib.dump(self.estimator, directory / "model.joblib")
        meta = {
            "format_version": MODEL_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "combiner": self.combiner,
            "feature_dim": self.feature_dim,
            **self.meta,
        }
        (directory / "model.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Classifier":
        directory = Path(directory)
        meta = json.loads((directory / "model.meta.json").read_text())
        estimator = joblib.load(directory / "model.joblib")
        kind, combiner, dim, seed = meta.pop("kind"), meta.pop("combiner"), meta.pop("feature_dim"), meta.pop("seed")
        meta.pop("format_version", None)
        return cls(kind, combiner, dim, seed, estimator, meta)


def train_classifier(train: LabeledEdgeSet, kind: str = "tree_ensemble", seed: int = 0) -> Classifier:
    if train.features is None or len(train) == 0:
        raise ClassifierError("training set is empty or has no features")
    if train.n_positive == 0 or train.n_negative == 0:
        raise ClassifierError("training set has a single class")
    est = _make_estimator(kind, seed)
    est.fit(train.features, train.labels)
    combiner = train.provenance.get("combiner", "concat")
    meta = {
        "train_digest": train.digest(),
        "embedding_graph_hash": train.provenance.get("embedding_graph_hash"),
        "n_train": len(train),
    }
    if kind == "tree_ensemble":
        meta["hyperparameters"] = {"n_estimators": 20, "max_depth": None, "bootstrap": True, "max_features": "sqrt"}
    return Classifier(kind, combiner, train.features.shape[1], seed, est, meta)


def predict_scores(
    model: Classifier, edges: LabeledEdgeSet | Iterable[tuple[int, int]], emb: EmbeddingMatrix, combiner: str
) -> np.ndarray:
    """One score in ``[0, 1]`` per candidate, in input order."""
    if combiner != model.combiner:
        raise ContractError(f"model was trained with combiner {model.combiner!r}, got {combiner!r}")
    if isinstance(edges, LabeledEdgeSet):
        devices, apps = edges.devices, edges.apps
    else:
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        devices, apps = pairs[:, 0], pairs[:, 1]
    if devices.shape[0] == 0:
        return np.empty(0)
    return model.score(featurize(emb, devices, apps, combiner))


# ---------------------------------------------------------------------------
# walk traces
# ---------------------------------------------------------------------------


@dataclass
class WalkTrace:
    path: tuple[str, ...]
    order: int
    hits: int


def explain_prediction(
    graph: BipartiteGraph,
    d: int,
    m: int,
    walk_budget: int = 1000,
    seed: int = 0,
    K: int = 4,
    kernel: str = "degree",
) -> list[WalkTrace]:
    """Sampled walks from device ``d`` that reach app ``m`` within ``K``
    orders, aggregated by path prefix (up to the first hit) with hit counts."""
    if not (0 <= d < graph.n_devices and 0 <= m < graph.n_apps):
        raise IndexError(f"pair ({d}, {m}) out of range")
    if walk_budget <= 0:
        return []
    n_steps = 2 * K - 1
    walks = sample_walks(graph, np.full(walk_budget, d), n_steps, seed, kernel)
    target = graph.n_devices + m
    counts: Counter = Counter()
    for row in walks:
        for order in range(1, K + 1):
            pos = 2 * order - 1
            if row[pos] < 0:
                break
            if row[pos] == target:
                counts[(tuple(row[: pos + 1].tolist()), order)] += 1
                break
    nd = graph.n_devices
    traces = [
        WalkTrace(tuple(graph.device_tokens[v] if v < nd else graph.app_tokens[v - nd] for v in path), order, hits)
        for (path, order), hits in counts.items()
    ]
    traces.sort(key=lambda t: (-t.hits, t.order, t.path))
    return traces
