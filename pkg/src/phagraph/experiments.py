"""
Experiment harness: method comparison, edge representations, classifiers,
training-data latency, rolling retraining and runtime scaling.

Every experiment derives its randomness from one root seed; each stage gets
its own substream via :func:`stage_seed`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .baselines import LineConfig, pa_scores, train_first_order, train_second_order
from .embedding import EmbeddingMatrix, TrainerConfig, train
from .graph import BipartiteGraph, InstallEvent, TemporalSplit, build_graph, temporal_split
from .metrics import FPR_TARGETS, EvalReport, roc_and_metrics
from .predictor import EdgeSets, LabeledEdgeSet, build_edge_sets, sample_negative_edges, train_classifier
from .synthetic import GeneratorConfig, GroundTruth, generate, holdout_future_edges

logger = logging.getLogger(__name__)

METHODS = ("pa", "first_order", "second_order", "full", "full_k1")
LATENCY_RATIOS = (0.07, 0.16, 0.25)
DAY = 86_400


def stage_seed(root: int, stage: str) -> int:
    """Deterministic 32-bit seed for a named stage."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class ExperimentConfig:
    dataset: GeneratorConfig = field(default_factory=GeneratorConfig)
    holdout_fraction: float = 0.1
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(walk_length=8))
    line: LineConfig = field(default_factory=LineConfig)
    classifier: str = "tree_ensemble"
    combiner: str = "concat"
    cold_policy: str = "drop"
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "holdout_fraction": self.holdout_fraction,
            "trainer": self.trainer.to_dict(),
            "line": self.line.to_dict(),
            "classifier": self.classifier,
            "combiner": self.combiner,
            "cold_policy": self.cold_policy,
            "workers": self.workers,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Dataset:
    split: TemporalSplit
    graph: BipartiteGraph
    sets: EdgeSets
    truth: GroundTruth | None = None
    timings: dict = field(default_factory=dict)


def synthetic_events(cfg: ExperimentConfig, seed: int) -> tuple[list[InstallEvent], list[InstallEvent], GroundTruth]:
    gen = replace(cfg.dataset, seed=stage_seed(seed, "generate"))
    _, truth = generate(gen)
    visible, future = holdout_future_edges(truth, cfg.holdout_fraction, stage_seed(seed, "holdout"))
    return visible, future, truth


def prepare_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    """Generate, hold out future edges, split at the end of the visible window."""
    t0 = time.perf_counter()
    visible, future, truth = synthetic_events(cfg, seed)
    boundary = cfg.dataset.time_window[1]
    horizon = max(ev.timestamp for ev in future) - boundary
    split = temporal_split(visible + future, boundary, horizon)
    t1 = time.perf_counter()
    graph = build_graph(split.train_events, split.train_window)
    t2 = time.perf_counter()
    sets = build_edge_sets(split, graph, stage_seed(seed, "edge_sets"), cfg.cold_policy)
    return Dataset(split, graph, sets, truth, {"generate": t1 - t0, "graph_build": t2 - t1})


# ---------------------------------------------------------------------------
# methods
# ---------------------------------------------------------------------------


def embed(method: str, graph: BipartiteGraph, cfg: ExperimentConfig, seed: int) -> EmbeddingMatrix:
    if method == "full":
        return train(graph, replace(cfg.trainer, seed=stage_seed(seed, "embed"), workers=cfg.workers))
    if method == "full_k1":
        return train(graph, replace(cfg.trainer, K=1, seed=stage_seed(seed, "embed"), workers=cfg.workers))
    line = replace(cfg.line, seed=stage_seed(seed, "embed"), workers=cfg.workers)
    if method == "first_order":
        return train_first_order(graph, line)
    if method == "second_order":
        return train_second_order(graph, line)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _score_with(emb, sets: EdgeSets, combiner: str, kind: str, seed: int, timings: dict) -> np.ndarray:
    train_set = sets.train.with_features(emb, combiner)
    test_set = sets.test.with_features(emb, combiner)
    t0 = time.perf_counter()
    model = train_classifier(train_set, kind, stage_seed(seed, "classifier"))
    timings["classifier"] = timings.get("classifier", 0.0) + time.perf_counter() - t0
    return model.score(test_set.features)


def _report(scores, test: LabeledEdgeSet, meta: dict) -> EvalReport:
    meta = {**meta, "test_digest": test.digest(), "n_test": len(test)}
    return roc_and_metrics(scores, test.labels, FPR_TARGETS, meta)


def run_method(method: str, ds: Dataset, cfg: ExperimentConfig, seed: int, emb: EmbeddingMatrix | None = None) -> EvalReport:
    timings = {}
    if method == "pa":
        t0 = time.perf_counter()
        scores = pa_scores(ds.graph, ds.sets.test.devices, ds.sets.test.apps).scores
        timings["score"] = time.perf_counter() - t0
    else:
        if emb is None:
            t0 = time.perf_counter()
            emb = embed(method, ds.graph, cfg, seed)
            timings["embedding"] = time.perf_counter() - t0
        scores = _score_with(emb, ds.sets, cfg.combiner, cfg.classifier, seed, timings)
    meta = {
        "method": method,
        "config_hash": cfg.digest(),
        "seed": seed,
        "timings": {**ds.timings, **timings},
        "combiner": cfg.combiner if method != "pa" else None,
        "classifier": cfg.classifier if method != "pa" else None,
        "cold_policy": cfg.cold_policy,
        "n_cold": ds.sets.info["n_cold"],
    }
    return _report(scores, ds.sets.test, meta)


@dataclass
class ResultTable:
    kind: str
    rows: list[EvalReport]
    failures: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def by(self, key: str) -> dict:
        return {r.meta[key]: r for r in self.rows}


def comparison_experiment(
    cfg: ExperimentConfig, methods: Sequence[str] = ("pa", "first_order", "second_order", "full"), seed: int = 0
) -> ResultTable:
    """One report per method on identical train/test candidates."""
    ds = prepare_dataset(cfg, seed)
    table = ResultTable("comparison", [])
    for method in methods:
        try:
            table.rows.append(run_method(method, ds, cfg, seed))
        except Exception as exc:  # a failing method must not sink the table
            logger.exception("method %s failed", method)
            table.failures[method] = f"{type(exc).__name__}: {exc}"
    table.extra["n_cold"] = ds.sets.info["n_cold"]
    return table


def representation_experiment(
    cfg: ExperimentConfig, combiners: Sequence[str] = ("concat", "average", "hadamard", "weighted_l1", "weighted_l2"),
    seed: int = 0,
) -> ResultTable:
    """One embedding, scored through each edge combiner on paired candidates."""
    ds = prepare_dataset(cfg, seed)
    emb = embed("full", ds.graph, cfg, seed)
    table = ResultTable("representation", [])
    for combiner in combiners:
        rep = run_method("full", ds, replace(cfg, combiner=combiner), seed, emb=emb)
        table.rows.append(rep)
    return table


def classifier_experiment(
    cfg: ExperimentConfig, kinds: Sequence[str] = ("tree_ensemble", "logistic", "gradient_boosting"), seed: int = 0
) -> ResultTable:
    ds = prepare_dataset(cfg, seed)
    emb = embed("full", ds.graph, cfg, seed)
    return ResultTable("classifier", [run_method("full", ds, replace(cfg, classifier=k), seed, emb=emb) for k in kinds])


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


def _token_pairs(edges) -> list[tuple[str, str]]:
    return [(e[0], e[1]) for e in edges]


def _to_index(pairs: list[tuple[str, str]], graph: BipartiteGraph) -> tuple[np.ndarray, np.ndarray]:
    d = np.array([graph.device_index.get(p[0], -1) for p in pairs], dtype=np.int64)
    m = np.array([graph.app_index.get(p[1], -1) for p in pairs], dtype=np.int64)
    return d, m


def latency_experiment(
    cfg: ExperimentConfig, drop_ratios: Sequence[float] = LATENCY_RATIOS, seed: int = 0
) -> ResultTable:
    """Remove a random share of training events and retrain; the test set is
    fixed across ratios. Ratio 0 is always included."""
    ratios = sorted({0.0, *map(float, drop_ratios)})
    if any(not 0 <= r < 1 for r in ratios):
        raise ValueError("drop ratios must lie in [0, 1)")
    visible, future, _ = synthetic_events(cfg, seed)
    boundary = cfg.dataset.time_window[1]
    split = temporal_split(visible + future, boundary, max(ev.timestamp for ev in future) - boundary)
    events = split.train_events
    perm = np.random.default_rng(stage_seed(seed, "latency")).permutation(len(events))

    graphs = {}
    for r in ratios:
        dropped = set(perm[: int(round(r * len(events)))].tolist())
        graphs[r] = build_graph([ev for i, ev in enumerate(events) if i not in dropped], split.train_window)
    smallest = graphs[ratios[-1]]

    all_pos = _token_pairs(split.train_edges) + _token_pairs(split.test_edges)
    test_pos = [p for p in _token_pairs(split.test_edges) if p[0] in smallest.device_index and p[1] in smallest.app_index]
    if not test_pos:
        raise ValueError("no test edge survives the largest drop ratio")
    d, m = _to_index(all_pos, smallest)
    ok = (d >= 0) & (m >= 0)
    neg = sample_negative_edges(
        smallest, len(test_pos), d[ok] * smallest.n_apps + m[ok], stage_seed(seed, "latency_test_neg")
    )
    test_neg = [(smallest.device_tokens[a], smallest.app_tokens[b]) for a, b in neg.tolist()]
    test_pairs = test_pos + test_neg
    labels = np.r_[np.ones(len(test_pos), dtype=np.int8), np.zeros(len(test_neg), dtype=np.int8)]
    # indices shift between graphs, so the shared test set is identified by tokens
    pairs_digest = hashlib.sha256(json.dumps([test_pairs, labels.tolist()]).encode()).hexdigest()

    table = ResultTable("latency", [])
    for r in ratios:
        g = graphs[r]
        td, tm = g.edges()
        d, m = _to_index(all_pos, g)
        ok = (d >= 0) & (m >= 0)
        tneg = sample_negative_edges(g, td.shape[0], d[ok] * g.n_apps + m[ok], stage_seed(seed, f"latency_neg_{r}"))
        train_set = LabeledEdgeSet(
            np.r_[td, tneg[:, 0]], np.r_[tm, tneg[:, 1]],
            np.r_[np.ones(td.shape[0], dtype=np.int8), np.zeros(tneg.shape[0], dtype=np.int8)],
        )
        ed, em = _to_index(test_pairs, g)
        test_set = LabeledEdgeSet(ed, em, labels)
        sets = EdgeSets(train_set, test_set, None, {"n_cold": 0})
        ds = Dataset(split, g, sets)
        rep = run_method("full", ds, cfg, seed)
        rep.meta["drop_ratio"] = r
        rep.meta["n_train_edges"] = g.n_edges
        rep.meta["test_pairs_digest"] = pairs_digest
        table.rows.append(rep)
    return table


# ---------------------------------------------------------------------------
# rolling retraining
# ---------------------------------------------------------------------------


def rolling_window_experiment(
    events: Sequence[InstallEvent],
    window_train: int,
    window_test: int,
    steps: int,
    seed: int = 0,
    cfg: ExperimentConfig | None = None,
    start: int | None = None,
) -> ResultTable:
    """Retrain and evaluate on a window sliding by ``window_test`` per step."""
    cfg = cfg or ExperimentConfig()
    events = list(events)
    t0 = min(ev.timestamp for ev in events) if start is None else start
    table = ResultTable("rolling", [])
    skipped = {}
    for step in range(steps):
        lo = t0 + step * window_test
        boundary = lo + window_train - 1
        window = [ev for ev in events if lo <= ev.timestamp <= boundary + window_test]
        step_seed = stage_seed(seed, f"rolling_{step}")
        try:
            split = temporal_split(window, boundary, window_test)
            graph = build_graph(split.train_events, split.train_window)
            sets = build_edge_sets(split, graph, stage_seed(step_seed, "edge_sets"), cfg.cold_policy)
        except ValueError as exc:
            skipped[step] = str(exc)
            continue
        rep = run_method("full", Dataset(split, graph, sets), cfg, step_seed)
        rep.meta["step"] = step
        rep.meta["train_window"] = [lo, boundary]
        rep.meta["test_window"] = [boundary + 1, boundary + window_test]
        table.rows.append(rep)
    table.extra["skipped"] = skipped
    table.extra["summary"] = rolling_summary(table.rows)
    return table


def rolling_summary(rows: Sequence[EvalReport]) -> dict:
    out = {}
    for t in FPR_TARGETS:
        vals = np.array([r.tpr_at[t] for r in rows])
        out[f"tpr@{t:g}"] = {"mean": float(vals.mean()) if vals.size else None, "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    aucs = np.array([r.auc for r in rows])
    out["auc"] = {"mean": float(aucs.mean()) if aucs.size else None, "std": float(aucs.std(ddof=1)) if aucs.size > 1 else 0.0}
    return out


def write_rolling_csv(path, table: ResultTable) -> None:
    with open(path, "w") as fh:
        fh.write("step," + ",".join(f"tpr@{t:g}" for t in FPR_TARGETS) + ",auc,ap\n")
        for r in table.rows:
            vals = ",".join(repr(r.tpr_at[t]) for t in FPR_TARGETS)
            fh.write(f"{r.meta['step']},{vals},{r.auc!r},{r.ap!r}\n")


def stationary_stream_config(base: GeneratorConfig, days: int) -> GeneratorConfig:
    """Generator config whose timestamps span ``days`` whole days."""
    return replace(base, time_window=(0, days * DAY - 1))


# ---------------------------------------------------------------------------
# runtime scaling
# ---------------------------------------------------------------------------


@dataclass
class ScalingRow:
    scale: float
    n_edges: int
    timings: dict[str, float]
    ratios: dict[str, float] | None = None


def runtime_report(measurements: Sequence[dict]) -> list[ScalingRow]:
    """Scaling table from ``{"scale", "n_edges", "timings"}`` records.

    Each row after the first carries time ratios against the previous row.
    """
    rows = [ScalingRow(float(m["scale"]), int(m["n_edges"]), dict(m["timings"])) for m in measurements]
    rows.sort(key=lambda r: r.scale)
    for prev, cur in zip(rows, rows[1:]):
        cur.ratios = {
            "scale": cur.scale / prev.scale,
            "edges": cur.n_edges / prev.n_edges,
            **{k: cur.timings[k] / prev.timings[k] for k in cur.timings if prev.timings.get(k)},
        }
    return rows


def runtime_experiment(
    cfg: ExperimentConfig, scales: Sequence[float] = (1, 2, 4), seed: int = 0, repeats: int = 1,
    clock: Callable[[], float] = time.perf_counter,
) -> list[ScalingRow]:
    """Time graph build, embedding and classifier training at each scale.

    Vertex counts and edge count grow together so the edge density is fixed.
    The fastest of ``repeats`` runs is kept per stage.
    """
    # compile the kernels before timing anything
    warm = replace(cfg.dataset, n_devices=50, n_apps=10, target_edges=100)
    warm_ds = prepare_dataset(replace(cfg, dataset=warm), seed)
    embed("full", warm_ds.graph, cfg, seed)

    measurements = []
    for s in scales:
        gen = replace(
            cfg.dataset,
            n_devices=int(cfg.dataset.n_devices * s),
            n_apps=int(cfg.dataset.n_apps * s),
            target_edges=int(cfg.dataset.target_edges * s),
        )
        scfg = replace(cfg, dataset=gen)
        best: dict[str, float] = {}
        for _ in range(repeats):
            visible, future, _ = synthetic_events(scfg, seed)
            boundary = gen.time_window[1]
            split = temporal_split(visible + future, boundary, max(ev.timestamp for ev in future) - boundary)
            t0 = clock()
            graph = build_graph(split.train_events, split.train_window)
            t1 = clock()
            emb = embed("full", graph, scfg, seed)
            t2 = clock()
            sets = build_edge_sets(split, graph, stage_seed(seed, "edge_sets"), cfg.cold_policy)
            train_set = sets.train.with_features(emb, cfg.combiner)
            t3 = clock()
            train_classifier(train_set, cfg.classifier, seed)
            t4 = clock()
            for k, v in (("graph_build", t1 - t0), ("embedding", t2 - t1), ("classifier", t4 - t3)):
                best[k] = min(best.get(k, np.inf), v)
        measurements.append({"scale": s, "n_edges": graph.n_edges, "timings": best})
    return runtime_report(measurements)
