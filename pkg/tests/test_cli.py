import json

import jsonschema
import pytest

from phagraph import __version__
from phagraph.cli import EXIT_IO, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXPLAIN_SCHEMA, run
from phagraph.config import SCHEMA, ConfigValidationError, load_config, parse_config

TINY = {
    "seed": 7,
    "generator": {"n_devices": 200, "n_apps": 30, "target_edges": 900, "n_groups": 3, "time_window": [0, 9999]},
    "holdout": {"fraction": 0.1},
    "split": {"boundary": 9999},
    "trainer": {"d": 8, "walks_per_vertex": 3, "neg_samples": 5},
    "line": {"d": 8, "epochs": 2},
    "experiment": {"methods": ["pa", "full"], "drop_ratios": [0.1], "scales": [1, 2]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    assert run(["generate", "-c", str(cfg), "-o", str(root / "data")]) == EXIT_OK
    assert run(["train", str(root / "data" / "events.csv"), "-c", str(cfg), "-o", str(root / "art")]) == EXIT_OK
    return root


class TestConfig:
    def test_round_trip(self):
        cfg = parse_config(TINY)
        assert parse_config(cfg.to_dict()) == cfg

    def test_missing_seed(self):
        with pytest.raises(ConfigValidationError) as err:
            parse_config({"trainer": {"d": 4}})
        assert err.value.fields == ["seed"]

    def test_unknown_field(self):
        with pytest.raises(ConfigValidationError, match="unknown field 'trainer.dd'"):
            parse_config({"seed": 1, "trainer": {"dd": 4}})

    def test_seed_not_allowed_in_sections(self):
        with pytest.raises(ConfigValidationError, match="trainer.seed"):
            parse_config({"seed": 1, "trainer": {"seed": 4}})

    def test_semantic_validation(self):
        with pytest.raises(ConfigValidationError, match="mixing"):
            parse_config({"seed": 1, "generator": {"mixing": 2.0}})

    def test_override(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(TINY))
        assert load_config(p, seed=11, workers=None).seed == 11

    def test_schema_is_valid(self):
        jsonschema.Draft7Validator.check_schema(SCHEMA)


class TestCommands:
    def test_generate_outputs(self, workspace):
        data = workspace / "data"
        run_doc = json.loads((data / "run.json").read_text())
        assert run_doc["version"] == __version__
        assert run_doc["split"]["n_future"] == 90
        assert (data / "groundtruth.json").exists()
        lines = (data / "events.csv").read_text().splitlines()
        assert len(lines) == 990

    def test_generate_deterministic(self, workspace, tmp_path):
        assert run(["generate", "-c", str(workspace / "config.json"), "-o", str(tmp_path / "again")]) == EXIT_OK
        assert (tmp_path / "again" / "events.csv").read_bytes() == (workspace / "data" / "events.csv").read_bytes()

    def test_train_outputs(self, workspace):
        art = workspace / "art"
        for name in ("graph", "embeddings", "model", "edges_train.csv", "edges_test.csv", "report.json", "roc.csv"):
            assert (art / name).exists(), name
        report = json.loads((art / "report.json").read_text())
        assert 0 <= report["reports"][0]["metrics"]["auc"] <= 1

    def test_build_graph(self, workspace, tmp_path, capsys):
        assert run(["build-graph", str(workspace / "data" / "events.csv"), "--window", "0", "9999", "-o", str(tmp_path / "g")]) == EXIT_OK
        stats = json.loads((tmp_path / "g" / "stats.json").read_text())
        assert stats["n_edges"] == 900
        assert "edges" in capsys.readouterr().out

    def test_predict(self, workspace, tmp_path):
        cand = tmp_path / "cand.csv"
        cand.write_text("device,app\nd0,m0\nd1,m1\nnobody,m0\n")
        assert run(["predict", str(workspace / "art"), str(cand), "-o", str(tmp_path / "p")]) == EXIT_OK
        rows = (tmp_path / "p" / "scores.csv").read_text().splitlines()
        assert rows[0] == "device,app,score,cold"
        assert len(rows) == 4 and rows[3].endswith(",1")

    def test_explain_json(self, workspace, capsys):
        edge = (workspace / "art" / "edges_train.csv").read_text().splitlines()[1].split(",")
        capsys.readouterr()
        assert run(["explain", str(workspace / "art"), edge[0], edge[1], "--budget", "50", "--json"]) == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        jsonschema.validate(doc, EXPLAIN_SCHEMA)
        assert doc["traces"][0]["path"] == [edge[0], edge[1]]

    def test_explain_unknown_token(self, workspace):
        assert run(["explain", str(workspace / "art"), "nobody", "m0"]) == EXIT_VALIDATION

    def test_export(self, workspace, tmp_path):
        assert run(["export", str(workspace / "art"), "-o", str(tmp_path / "x")]) == EXIT_OK
        for name in ("config.schema.json", "features_train.tsv", "pa_train.csv", "pa_test.csv"):
            assert (tmp_path / "x" / name).exists(), name

    @pytest.mark.parametrize("kind,artifact", [("comparison", "roc.csv"), ("latency", "roc.csv"), ("runtime", "runtime.csv")])
    def test_experiment(self, workspace, tmp_path, kind, artifact):
        out = tmp_path / kind
        assert run(["experiment", kind, "-c", str(workspace / "config.json"), "-o", str(out)]) == EXIT_OK
        assert (out / artifact).exists()
        assert json.loads((out / "report.json").read_text())["kind"] == kind

    def test_rolling_experiment(self, tmp_path):
        cfg = dict(TINY, experiment={"window_train": 3000, "window_test": 1000, "steps": 2})
        cfg["generator"] = dict(TINY["generator"], target_edges=1500)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert run(["experiment", "rolling", "-c", str(path), "-o", str(tmp_path / "r")]) == EXIT_OK
        assert len((tmp_path / "r" / "rolling.csv").read_text().splitlines()) == 3


class TestExitCodes:
    def test_version(self, capsys):
        assert run(["--version"]) == EXIT_OK
        assert __version__ in capsys.readouterr().out

    def test_unknown_kind(self, capsys):
        assert run(["experiment", "nope", "--seed", "1"]) == EXIT_VALIDATION
        assert "comparison" in capsys.readouterr().err

    def test_missing_seed(self, tmp_path, capsys):
        assert run(["generate", "-o", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "'seed'" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"seed": 1, "trainer": {"dd": 3}}))
        assert run(["generate", "-c", str(p), "-o", str(tmp_path / "o")]) == EXIT_VALIDATION
        assert "trainer.dd" in capsys.readouterr().err

    def test_refuses_overwrite(self, workspace, capsys):
        cfg = str(workspace / "config.json")
        assert run(["generate", "-c", cfg, "-o", str(workspace / "data")]) == EXIT_IO
        assert "--overwrite" in capsys.readouterr().err
        assert run(["generate", "-c", cfg, "-o", str(workspace / "data"), "--overwrite"]) == EXIT_OK

    def test_missing_config_file(self, tmp_path):
        assert run(["generate", "-c", str(tmp_path / "none.json"), "-o", str(tmp_path / "o")]) == EXIT_IO

    def test_runtime_failure(self, tmp_path, capsys):
        events = tmp_path / "e.csv"
        events.write_text("device_id,app_id,timestamp\nd0,m0,5\n")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "split": {"boundary": 1}}))
        code = run(["train", str(events), "-c", str(cfg), "-o", str(tmp_path / "o")])
        assert code == EXIT_RUNTIME
        assert "[split]" in capsys.readouterr().err
