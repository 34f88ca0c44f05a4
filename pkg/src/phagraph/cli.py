"""
``phagraph`` command line.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure,
3 I/O failure (including refusal to overwrite existing outputs).
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .baselines import pa_scores
from .config import SCHEMA, ConfigValidationError, RunConfig, load_config
from .embedding import EmbeddingMatrix, train
from .experiments import (
    classifier_experiment,
    comparison_experiment,
    latency_experiment,
    representation_experiment,
    rolling_summary,
    rolling_window_experiment,
    runtime_experiment,
    stage_seed,
    write_rolling_csv,
)
from .graph import (
    EventParseError,
    build_graph,
    degree_histogram,
    ingest_events,
    khop_degree_correlation,
    load_snapshot,
    save_snapshot,
    temporal_split,
    write_events,
)
from .metrics import FPR_TARGETS, roc_and_metrics, write_report
from .predictor import Classifier, LabeledEdgeSet, build_edge_sets, explain_prediction, predict_scores, train_classifier
from .synthetic import generate, holdout_future_edges

logger = logging.getLogger("phagraph")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
EXPERIMENT_KINDS = ("comparison", "latency", "rolling", "runtime", "representation", "classifier")
EXPLAIN_SCHEMA = {
    "type": "object",
    "required": ["device", "app", "score", "walk_budget", "traces"],
    "properties": {
        "device": {"type": "string"},
        "app": {"type": "string"},
        "score": {"type": ["number", "null"]},
        "walk_budget": {"type": "integer"},
        "traces": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["path", "order", "hits"],
                "properties": {
                    "path": {"type": "array", "items": {"type": "string"}},
                    "order": {"type": "integer", "minimum": 1},
                    "hits": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}


class OutputExists(OSError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(path: Path) -> dict[str, str]:
    path = Path(path)
    if path.is_file():
        return {str(path): _sha256(path)}
    return {str(p): _sha256(p) for p in sorted(path.rglob("*")) if p.is_file() and p.name != "run.json"}


def _prepare_out(out: str | None, overwrite: bool) -> Path:
    if out is None:
        raise click.UsageError("missing output directory (-o/--out)")
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise OutputExists(f"{path} exists and is not a directory")
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise OutputExists(f"output directory {path} is not empty; pass --overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_run(out: Path, command: str, cfg: RunConfig | None, inputs: list[Path], extra: dict | None = None) -> None:
    doc = {
        "version": __version__,
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "inputs": {k: v for p in inputs for k, v in _hash_tree(p).items()},
        "outputs": _hash_tree(out),
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_default))


def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _event_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "jsonl" if path.suffix in (".jsonl", ".json") else "csv"


def _read_events(path: str, fmt: str | None):
    path = Path(path)
    res = ingest_events(path, _event_format(path, fmt))
    if res.malformed:
        click.echo(f"warning: skipped {res.malformed} malformed lines (first at line {res.first_malformed})", err=True)
    return res.events


def common_options(f):
    """Flags shared by every subcommand."""
    opts = [
        click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config."),
        click.option("-o", "--out", type=click.Path(file_okay=False), help="Output directory."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Root seed; overrides the config."),
        click.option("--workers", type=click.IntRange(min=1), help="Parallel workers; overrides the config."),
        click.option("--overwrite", is_flag=True, help="Replace existing outputs."),
        click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]), help="Event file format."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _config(config_path, seed, workers, require=True) -> RunConfig:
    if config_path is None and seed is None:
        if require:
            raise ConfigValidationError("a config file (-c) or --seed is required; missing required field 'seed'", ["seed"])
        seed = 0
    if config_path is not None and not Path(config_path).exists():
        raise FileNotFoundError(f"config file {config_path} not found")
    return load_config(config_path, seed=seed, workers=workers)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Device/app install graphs: generation, embedding, prediction, experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command("generate")
@common_options
def cmd_generate(config_path, out, seed, workers, overwrite, fmt):
    """Write a synthetic event stream and its ground truth."""
    cfg = _config(config_path, seed, workers)
    out = _prepare_out(out, overwrite)
    fmt = fmt or "csv"
    gen = replace(cfg.generator, seed=stage_seed(cfg.seed, "generate"))
    events, truth = generate(gen)
    extra = {}
    if cfg.holdout_fraction is not None:
        visible, future = holdout_future_edges(truth, cfg.holdout_fraction, stage_seed(cfg.seed, "holdout"))
        events = visible + future
        boundary = gen.time_window[1]
        horizon = max((ev.timestamp for ev in future), default=boundary + 1) - boundary
        extra["split"] = {"boundary": boundary, "horizon": horizon, "n_future": len(future)}
    with open(out / f"events.{fmt}", "w") as fh:
        write_events(events, fh, fmt)
    truth.save(out / "groundtruth.json")
    _write_run(out, "generate", cfg, [Path(config_path)] if config_path else [], extra)
    click.echo(f"wrote {len(events)} events to {out / f'events.{fmt}'}")


@main.command("build-graph")
@click.argument("events", type=click.Path(exists=True, dir_okay=False))
@click.option("--window", nargs=2, type=int, help="Inclusive [start end] time window.")
@click.option("--stats/--no-stats", default=True, help="Also write degree statistics.")
@common_options
def cmd_build_graph(events, window, stats, config_path, out, seed, workers, overwrite, fmt):
    """Build and snapshot the bipartite graph of an event file."""
    out = _prepare_out(out, overwrite)
    graph = build_graph(_read_events(events, fmt), tuple(window) if window else None)
    save_snapshot(graph, out / "graph")
    summary = {"n_devices": graph.n_devices, "n_apps": graph.n_apps, "n_edges": graph.n_edges, "hash": graph.content_hash()}
    if stats:
        hist = degree_histogram(graph, "app")
        summary["app_degrees"] = {
            "exponent": hist.exponent, "x_min": hist.x_min, "ks_distance": hist.ks_distance, "reliable": hist.reliable,
            "histogram": {str(k): v for k, v in hist.as_dict().items()},
        }
        for hops in (2, 4):
            try:
                summary[f"corr_{hops}hop"] = khop_degree_correlation(graph, hops, seed=seed or 0)
            except ValueError as exc:
                summary[f"corr_{hops}hop"] = None
                summary[f"corr_{hops}hop_note"] = str(exc)
    (out / "stats.json").write_text(json.dumps(summary, indent=2, default=_default))
    _write_run(out, "build-graph", None, [Path(events)], {"window": list(window) if window else None})
    click.echo(f"graph: {graph.n_devices} devices, {graph.n_apps} apps, {graph.n_edges} edges")


def _split_for(cfg: RunConfig, events):
    t_max = max(ev.timestamp for ev in events)
    boundary = t_max if cfg.boundary is None else cfg.boundary
    horizon = cfg.horizon or max(t_max - boundary, 1)
    return temporal_split(events, boundary, horizon)


@main.command("train")
@click.argument("events", type=click.Path(exists=True, dir_okay=False))
@click.option("--combiner", type=click.Choice(["concat", "average", "hadamard", "weighted_l1", "weighted_l2"]))
@click.option("--classifier", type=click.Choice(["tree_ensemble", "logistic", "gradient_boosting"]))
@common_options
def cmd_train(events, combiner, classifier, config_path, out, seed, workers, overwrite, fmt):
    """Graph, embedding and classifier from an event file.

    Events after the configured split boundary form the test set and are
    scored into report.json; with no boundary every event is training data.
    """
    cfg = _config(config_path, seed, workers)
    cfg = replace(cfg, combiner=combiner or cfg.combiner, classifier=classifier or cfg.classifier)
    out = _prepare_out(out, overwrite)
    stage = "split"
    try:
        split = _split_for(cfg, _read_events(events, fmt))
        stage = "graph"
        graph = build_graph(split.train_events, split.train_window)
        save_snapshot(graph, out / "graph")
        stage = "embedding"
        emb = train(graph, replace(cfg.trainer, seed=stage_seed(cfg.seed, "embed"), workers=cfg.workers))
        emb.save(out / "embeddings", graph)
        stage = "datasets"
        sets = build_edge_sets(split, graph, stage_seed(cfg.seed, "edge_sets"), cfg.cold_policy)
        sets.train.write_csv(out / "edges_train.csv", graph)
        train_set = sets.train.with_features(emb, cfg.combiner)
        stage = "classifier"
        model = train_classifier(train_set, cfg.classifier, stage_seed(cfg.seed, "classifier"))
        model.meta["graph_hash"] = graph.content_hash()
        model.save(out / "model")
        extra = {"graph_hash": graph.content_hash(), "embedding_digest": emb.digest()}
        if len(sets.test):
            stage = "evaluation"
            sets.test.write_csv(out / "edges_test.csv", graph)
            scores = predict_scores(model, sets.test, emb, cfg.combiner)
            report = roc_and_metrics(scores, sets.test.labels, FPR_TARGETS, {
                "method": "full", "seed": cfg.seed, "combiner": cfg.combiner, "classifier": cfg.classifier,
                "n_cold": sets.info["n_cold"], "test_digest": sets.test.digest(),
            })
            write_report(out / "report.json", [report])
            report.write_roc(out / "roc.csv")
            extra["metrics"] = report.summary()
            click.echo(" ".join(f"{k}={v:.4f}" for k, v in report.summary().items()))
    except (ConfigValidationError, OSError):
        raise
    except Exception as exc:
        raise RuntimeError(f"[{stage}] {type(exc).__name__}: {exc}") from exc
    _write_run(out, "train", cfg, [Path(events)] + ([Path(config_path)] if config_path else []), extra)


def _load_artifacts(artifacts: Path):
    graph = load_snapshot(artifacts / "graph")
    emb = EmbeddingMatrix.load(artifacts / "embeddings", graph)
    model = Classifier.load(artifacts / "model")
    return graph, emb, model


def _index(graph, device: str, app: str) -> tuple[int, int]:
    d = graph.device_index.get(device, -1)
    m = graph.app_index.get(app, -1)
    return d, m


@main.command("predict")
@click.argument("artifacts", type=click.Path(exists=True, file_okay=False))
@click.argument("candidates", type=click.Path(exists=True, dir_okay=False))
@common_options
def cmd_predict(artifacts, candidates, config_path, out, seed, workers, overwrite, fmt):
    """Score ``device,app`` candidate pairs (CSV, optional header) with a trained model.

    Tokens unseen in training get a zero embedding.
    """
    out = _prepare_out(out, overwrite)
    graph, emb, model = _load_artifacts(Path(artifacts))
    pairs = []
    with open(candidates) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = [p.strip() for p in line.strip().split(",")]
            if not parts[0] or (line_no == 1 and parts[:2] == ["device", "app"]):
                continue
            if len(parts) < 2:
                raise click.BadParameter(f"line {line_no}: expected 'device,app'", param_hint="CANDIDATES")
            pairs.append((parts[0], parts[1]))
    idx = [_index(graph, d, m) for d, m in pairs]
    scores = predict_scores(model, idx, emb, model.combiner)
    with open(out / "scores.csv", "w") as fh:
        fh.write("device,app,score,cold\n")
        for (d, m), (di, mi), s in zip(pairs, idx, scores.tolist()):
            fh.write(f"{d},{m},{s!r},{int(di < 0 or mi < 0)}\n")
    _write_run(out, "predict", None, [Path(artifacts), Path(candidates)])
    click.echo(f"scored {len(pairs)} candidates")


def _replicate_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.seed + i for i in range(cfg.replicates)]


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0, "n": int(a.size)}


def _summarize(rows, key) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(str(r.meta[key]), []).append(r)
    out = {}
    for name, reps in groups.items():
        out[name] = {m: _mean_std([r.summary()[m] for r in reps]) for m in reps[0].summary()}
    return out


def _write_rocs(path: Path, rows, key) -> None:
    with open(path, "w") as fh:
        fh.write(f"{key},seed,fpr,tpr\n")
        for r in rows:
            for f, t in r.roc:
                fh.write(f"{r.meta[key]},{r.meta['seed']},{f!r},{t!r}\n")


@main.command("experiment")
@click.argument("kind", type=click.Choice(EXPERIMENT_KINDS))
@common_options
def cmd_experiment(kind, config_path, out, seed, workers, overwrite, fmt):
    """Run an evaluation experiment and write report.json plus CSVs."""
    cfg = _config(config_path, seed, workers)
    out = _prepare_out(out, overwrite)
    ecfg = cfg.experiment_config()
    extra: dict = {"kind": kind, "config_hash": ecfg.digest()}
    rows = []
    if kind in ("comparison", "representation", "classifier", "latency"):
        key = {"comparison": "method", "representation": "combiner", "classifier": "classifier", "latency": "drop_ratio"}[kind]
        failures = {}
        for s in _replicate_seeds(cfg):
            if kind == "comparison":
                table = comparison_experiment(ecfg, cfg.methods, s)
            elif kind == "representation":
                table = representation_experiment(ecfg, seed=s)
            elif kind == "classifier":
                table = classifier_experiment(ecfg, seed=s)
            else:
                table = latency_experiment(ecfg, cfg.drop_ratios, s)
            rows += table.rows
            failures.update({f"{m}@{s}": v for m, v in table.failures.items()})
        extra["summary"] = _summarize(rows, key)
        extra["failures"] = failures
        _write_rocs(out / "roc.csv", rows, key)
    elif kind == "rolling":
        days_span = cfg.window_train + cfg.steps * cfg.window_test
        gen = replace(cfg.generator, time_window=(0, days_span - 1), seed=stage_seed(cfg.seed, "generate"))
        events, _ = generate(gen)
        table = rolling_window_experiment(events, cfg.window_train, cfg.window_test, cfg.steps, cfg.seed, ecfg, start=0)
        rows = table.rows
        write_rolling_csv(out / "rolling.csv", table)
        extra["summary"] = rolling_summary(rows)
        extra["skipped"] = table.extra["skipped"]
    else:
        scaling = runtime_experiment(ecfg, cfg.scales, cfg.seed, cfg.repeats)
        extra["scaling"] = [
            {"scale": r.scale, "n_edges": r.n_edges, "timings": r.timings, "ratios": r.ratios} for r in scaling
        ]
        with open(out / "runtime.csv", "w") as fh:
            stages = list(scaling[0].timings)
            fh.write("scale,n_edges," + ",".join(stages) + "," + ",".join(f"{s}_ratio" for s in stages) + "\n")
            for r in scaling:
                ratios = [repr(r.ratios[s]) if r.ratios and s in r.ratios else "" for s in stages]
                fh.write(f"{r.scale!r},{r.n_edges}," + ",".join(repr(r.timings[s]) for s in stages) + "," + ",".join(ratios) + "\n")
    write_report(out / "report.json", rows, extra)
    _write_run(out, f"experiment {kind}", cfg, [Path(config_path)] if config_path else [])
    click.echo(json.dumps(extra.get("summary") or extra.get("scaling"), indent=2, default=_default))


@main.command("explain")
@click.argument("artifacts", type=click.Path(exists=True, file_okay=False))
@click.argument("device")
@click.argument("app")
@click.option("--budget", default=1000, show_default=True, type=click.IntRange(min=0), help="Walks to sample.")
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
@common_options
def cmd_explain(artifacts, device, app, budget, as_json, config_path, out, seed, workers, overwrite, fmt):
    """Walk paths from DEVICE that reach APP, with hit counts and the model score."""
    graph, emb, model = _load_artifacts(Path(artifacts))
    d, m = _index(graph, device, app)
    if d < 0 or m < 0:
        missing = device if d < 0 else app
        raise LookupError(f"unknown token {missing!r}")
    trainer_cfg = emb.meta.get("config", {})
    traces = explain_prediction(
        graph, d, m, budget, seed or 0, trainer_cfg.get("K", 4), trainer_cfg.get("kernel", "degree")
    )
    score = float(predict_scores(model, [(d, m)], emb, model.combiner)[0])
    doc = {
        "device": device,
        "app": app,
        "score": score,
        "walk_budget": budget,
        "traces": [{"path": list(t.path), "order": t.order, "hits": t.hits} for t in traces],
    }
    if as_json:
        click.echo(json.dumps(doc, indent=2))
        return
    click.echo(f"{device} -> {app}  score={score:.4f}")
    if not traces:
        click.echo("no connecting walks within budget")
    for t in traces:
        click.echo(f"  order {t.order}  hits {t.hits:5d}  " + " -> ".join(t.path))


@main.command("export")
@click.argument("artifacts", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--what", "what", multiple=True, default=("features", "pa", "schema"), show_default=True,
    type=click.Choice(["features", "pa", "schema"]),
)
@common_options
def cmd_export(artifacts, what, config_path, out, seed, workers, overwrite, fmt):
    """Export edge features, preferential attachment scores or the config schema."""
    out = _prepare_out(out, overwrite)
    artifacts = Path(artifacts)
    if "schema" in what:
        (out / "config.schema.json").write_text(json.dumps(SCHEMA, indent=2))
    if {"features", "pa"} & set(what):
        graph, emb, model = _load_artifacts(artifacts)
        for name in ("train", "test"):
            path = artifacts / f"edges_{name}.csv"
            if not path.exists():
                continue
            es = _read_edge_csv(path, graph)
            if "features" in what:
                es.with_features(emb, model.combiner).write_features(out / f"features_{name}.tsv", graph)
            if "pa" in what:
                pa_scores(graph, es.devices, es.apps).write_csv(out / f"pa_{name}.csv", graph)
    _write_run(out, "export", None, [artifacts], {"what": list(what)})


def _read_edge_csv(path: Path, graph) -> LabeledEdgeSet:
    d, m, y = [], [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            dt, mt, label = line.rstrip("\n").split(",")
            d.append(graph.device_index.get(dt, -1))
            m.append(graph.app_index.get(mt, -1))
            y.append(int(label))
    return LabeledEdgeSet(np.array(d, dtype=np.int64), np.array(m, dtype=np.int64), np.array(y, dtype=np.int8))


def run(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        main.main(args=argv, prog_name="phagraph", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except (ConfigValidationError, EventParseError, LookupError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - everything else is a runtime failure
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


def entry() -> None:
    sys.exit(run())
