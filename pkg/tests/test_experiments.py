from dataclasses import replace

import numpy as np
import pytest

from phagraph.baselines import LineConfig
from phagraph.embedding import TrainerConfig
from phagraph.experiments import (
    ExperimentConfig,
    classifier_experiment,
    comparison_experiment,
    latency_experiment,
    prepare_dataset,
    representation_experiment,
    rolling_summary,
    rolling_window_experiment,
    runtime_experiment,
    runtime_report,
    stage_seed,
    stationary_stream_config,
    synthetic_events,
    write_rolling_csv,
)
from phagraph.synthetic import GeneratorConfig

SMALL = ExperimentConfig(
    dataset=GeneratorConfig(n_devices=300, n_apps=40, target_edges=1500, n_groups=4),
    trainer=TrainerConfig(d=8, walk_length=8, walks_per_vertex=4, neg_samples=5),
    line=LineConfig(d=8, epochs=3),
)


@pytest.fixture(scope="module")
def comparison():
    return comparison_experiment(SMALL, seed=1)


class TestSeeds:
    def test_stage_seed_stable(self):
        assert stage_seed(3, "embed") == stage_seed(3, "embed")
        assert stage_seed(3, "embed") != stage_seed(3, "classifier")
        assert stage_seed(3, "embed") != stage_seed(4, "embed")
        assert 0 <= stage_seed(2**64 - 1, "x") < 2**32


class TestDataset:
    def test_prepare(self):
        ds = prepare_dataset(SMALL, 0)
        assert ds.split.boundary == SMALL.dataset.time_window[1]
        assert ds.sets.train.is_balanced() and ds.sets.test.is_balanced()
        assert ds.graph.n_edges == ds.sets.info["n_train_pos"]

    def test_holdout_size(self):
        visible, future, truth = synthetic_events(SMALL, 0)
        # future pairs are drawn on top of the visible corpus
        assert len(future) == round(0.1 * truth.n_edges)
        assert len(visible) == truth.n_edges
        seen = {(e.device_id, e.app_id) for e in visible}
        assert not any((e.device_id, e.app_id) in seen for e in future)


class TestComparison:
    def test_methods_paired(self, comparison):
        assert set(comparison.by("method")) == {"pa", "first_order", "second_order", "full"}
        assert not comparison.failures
        assert len({r.meta["test_digest"] for r in comparison.rows}) == 1

    def test_meta(self, comparison):
        for r in comparison.rows:
            assert r.meta["seed"] == 1
            assert r.meta["config_hash"] == SMALL.digest()
            assert 0 <= r.auc <= 1

    def test_deterministic(self, comparison):
        again = comparison_experiment(SMALL, methods=("full",), seed=1)
        assert again.rows[0].auc == comparison.by("method")["full"].auc

    def test_failure_recorded(self):
        bad = replace(SMALL, trainer=replace(SMALL.trainer, learning_rate=-1.0))
        table = comparison_experiment(bad, methods=("pa", "full"), seed=0)
        assert [r.meta["method"] for r in table.rows] == ["pa"]
        assert "full" in table.failures


class TestRepresentationAndClassifier:
    def test_combiners_share_test_set(self):
        table = representation_experiment(SMALL, seed=0)
        assert [r.meta["combiner"] for r in table.rows] == ["concat", "average", "hadamard", "weighted_l1", "weighted_l2"]
        assert len({r.meta["test_digest"] for r in table.rows}) == 1

    def test_classifiers(self):
        table = classifier_experiment(SMALL, seed=0)
        assert [r.meta["classifier"] for r in table.rows] == ["tree_ensemble", "logistic", "gradient_boosting"]


class TestLatency:
    def test_rows_and_fixed_test(self):
        table = latency_experiment(SMALL, seed=0)
        assert [r.meta["drop_ratio"] for r in table.rows] == [0.0, 0.07, 0.16, 0.25]
        assert len({r.meta["test_pairs_digest"] for r in table.rows}) == 1
        assert len({r.meta["n_test"] for r in table.rows}) == 1
        edges = [r.meta["n_train_edges"] for r in table.rows]
        assert edges == sorted(edges, reverse=True)

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            latency_experiment(SMALL, drop_ratios=(1.0,), seed=0)


class TestRolling:
    def test_single_step(self):
        gen = stationary_stream_config(SMALL.dataset, 4)
        events = synthetic_events(replace(SMALL, dataset=gen), 0)[0]
        table = rolling_window_experiment(events, 3 * 86_400, 86_400, 1, seed=0, cfg=SMALL, start=0)
        assert len(table.rows) == 1
        r = table.rows[0]
        assert r.meta["train_window"] == [0, 3 * 86_400 - 1]
        assert r.meta["test_window"] == [3 * 86_400, 4 * 86_400 - 1]

    def test_empty_step_skipped(self):
        gen = stationary_stream_config(SMALL.dataset, 2)
        events = synthetic_events(replace(SMALL, dataset=gen), 0)[0]
        table = rolling_window_experiment(events, 86_400, 86_400, 3, seed=0, cfg=SMALL, start=0)
        assert len(table.rows) == 1
        assert set(table.extra["skipped"]) == {1, 2}

    def test_summary_and_csv(self, tmp_path, comparison):
        rows = comparison.rows[:3]
        for i, r in enumerate(rows):
            r.meta["step"] = i
        s = rolling_summary(rows)
        assert s["auc"]["std"] == pytest.approx(np.std([r.auc for r in rows], ddof=1))
        table = type(comparison)("rolling", rows)
        write_rolling_csv(tmp_path / "rolling.csv", table)
        lines = (tmp_path / "rolling.csv").read_text().splitlines()
        assert lines[0] == "step,tpr@0.0001,tpr@0.001,tpr@0.005,auc,ap"
        assert len(lines) == 4


class TestRuntime:
    def test_report_ratios(self):
        rows = runtime_report(
            [
                {"scale": 2, "n_edges": 200, "timings": {"embedding": 4.0}},
                {"scale": 1, "n_edges": 100, "timings": {"embedding": 2.0}},
                {"scale": 4, "n_edges": 400, "timings": {"embedding": 10.0}},
            ]
        )
        assert [r.scale for r in rows] == [1, 2, 4]
        assert rows[0].ratios is None
        assert rows[1].ratios == {"scale": 2.0, "edges": 2.0, "embedding": 2.0}
        assert rows[2].ratios["embedding"] == 2.5

    def test_fake_clock(self):
        ticks = iter(np.arange(0.0, 1e4, 1.0))
        rows = runtime_experiment(SMALL, scales=(1, 2), clock=lambda: next(ticks))
        assert [r.scale for r in rows] == [1.0, 2.0]
        assert rows[0].timings == {"graph_build": 1.0, "embedding": 1.0, "classifier": 1.0}
        assert rows[1].n_edges > rows[0].n_edges
