import numpy as np
import pytest

from phagraph.embedding import EmbeddingMatrix
from phagraph.graph import build_graph, graph_from_edges, temporal_split
from phagraph.predictor import (
    CLASSIFIERS,
    Classifier,
    ClassifierError,
    ContractError,
    LabeledEdgeSet,
    SamplingError,
    build_datasets,
    build_edge_sets,
    combine,
    explain_prediction,
    feature_dim,
    featurize,
    featurize_edge,
    predict_scores,
    sample_negative_edges,
    train_classifier,
)

from conftest import ev


class TestCombiners:
    A = np.array([1.0, -2.0, 3.0])
    B = np.array([4.0, 0.5, -1.0])

    @pytest.mark.parametrize(
        "name,expect",
        [
            ("concat", [1.0, -2.0, 3.0, 4.0, 0.5, -1.0]),
            ("average", [2.5, -0.75, 1.0]),
            ("hadamard", [4.0, -1.0, -3.0]),
            ("weighted_l1", [3.0, 2.5, 4.0]),
            ("weighted_l2", [9.0, 6.25, 16.0]),
        ],
    )
    def test_values(self, name, expect):
        np.testing.assert_array_equal(combine(self.A, self.B, name), expect)
        assert combine(self.A, self.B, name).shape[0] == feature_dim(3, name)

    def test_unknown(self):
        with pytest.raises(ValueError):
            combine(self.A, self.B, "max")
        with pytest.raises(ValueError):
            feature_dim(3, "max")

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            combine(self.A, self.B[:2], "hadamard")

    def test_featurize_rows(self, toy_graph):
        rng = np.random.default_rng(0)
        emb = EmbeddingMatrix(rng.normal(size=(toy_graph.n_vertices, 4)), toy_graph.n_devices, toy_graph.n_apps)
        X = featurize(emb, [0, 2, -1], [1, -1, 0], "concat")
        np.testing.assert_array_equal(X[0], featurize_edge(emb, 0, 1))
        assert not X[1, 4:].any() and not X[2, :4].any()


class TestNegativeSampling:
    def test_distinct_non_edges(self, toy_graph):
        neg = sample_negative_edges(toy_graph, 10, seed=0)
        keys = neg[:, 0] * toy_graph.n_apps + neg[:, 1]
        assert np.unique(keys).shape[0] == 10
        assert not np.isin(keys, toy_graph.edge_keys()).any()

    def test_exclusion(self, toy_graph):
        excl = [(0, 0), (0, 1)]
        for seed in range(20):
            neg = sample_negative_edges(toy_graph, 5, excl, seed=seed)
            assert not any((int(d), int(m)) in excl for d, m in neg)

    def test_exhaustion(self, toy_graph):
        # 5 x 5 grid minus 10 edges leaves 15 non-edges
        assert sample_negative_edges(toy_graph, 15, seed=0).shape == (15, 2)
        with pytest.raises(SamplingError):
            sample_negative_edges(toy_graph, 16, seed=0)

    def test_uniform(self):
        # a graph with a single edge; all 99 other cells equally likely
        g = graph_from_edges([f"d{i}" for i in range(10)], [f"m{j}" for j in range(10)], np.array([0]), np.array([0]))
        counts = np.zeros(100)
        for seed in range(3000):
            for d, m in sample_negative_edges(g, 3, seed=seed):
                counts[d * 10 + m] += 1
        assert counts[0] == 0
        obs = counts[1:]
        chi2 = ((obs - obs.mean()) ** 2 / obs.mean()).sum()
        # 98 degrees of freedom; 99.9% quantile is about 143
        assert chi2 < 143


def split_events():
    events = [ev(f"d{i}", f"m{j}", t) for t, (i, j) in enumerate([(i, j) for i in range(8) for j in range(6) if (i + j) % 3 == 0])]
    later = [ev("d0", "m1", 1000), ev("d1", "m0", 1001), ev("d2", "m2", 1002), ev("dX", "m0", 1003), ev("d3", "mY", 1004)]
    return events + later


class TestEdgeSets:
    def setup_method(self):
        self.split = temporal_split(split_events(), 999, 100)
        self.graph = build_graph(self.split.train_events)

    def test_balanced_and_disjoint(self):
        sets = build_edge_sets(self.split, self.graph, seed=1)
        nm = self.graph.n_apps
        assert sets.train.is_balanced() and sets.test.is_balanced()
        key = lambda s, lab: set((s.devices[s.labels == lab] * nm + s.apps[s.labels == lab]).tolist())
        train_pos, test_pos = key(sets.train, 1), key(sets.test, 1)
        train_neg, test_neg = key(sets.train, 0), key(sets.test, 0)
        assert not (train_neg | test_neg) & (train_pos | test_pos)
        assert not train_neg & test_neg
        assert not train_pos & test_pos

    def test_cold_drop(self):
        sets = build_edge_sets(self.split, self.graph, seed=1)
        assert sets.info["n_cold"] == 2
        assert sets.test.n_positive == 3
        assert len(sets.cold_test) == 2

    def test_cold_zero(self):
        sets = build_edge_sets(self.split, self.graph, seed=1, cold_policy="zero")
        assert sets.test.n_positive == 5
        assert (sets.test.devices == -1).sum() == 1 and (sets.test.apps == -1).sum() == 1

    def test_deterministic(self):
        a = build_edge_sets(self.split, self.graph, seed=4)
        b = build_edge_sets(self.split, self.graph, seed=4)
        assert a.train.digest() == b.train.digest() and a.test.digest() == b.test.digest()

    def test_embedding_graph_mismatch(self, toy_graph):
        emb = EmbeddingMatrix(np.zeros((toy_graph.n_vertices, 2)), toy_graph.n_devices, toy_graph.n_apps, {"graph_hash": toy_graph.content_hash()})
        with pytest.raises(ContractError):
            build_datasets(emb, self.split, self.graph)


def gaussian_sets(rng, n=2000, d=6):
    """Positive and negative feature rows separated by 3 sigma along every axis."""
    def block(n):
        y = np.r_[np.ones(n // 2), np.zeros(n // 2)].astype(np.int8)
        X = rng.normal(size=(n, d)) + 3.0 / np.sqrt(d) * y[:, None]
        return LabeledEdgeSet(np.arange(n), np.arange(n), y, X)
    return block(n), block(n)


class TestClassifier:
    @pytest.mark.parametrize("kind", CLASSIFIERS)
    def test_separates_gaussians(self, kind):
        from phagraph.metrics import roc_and_metrics

        train, test = gaussian_sets(np.random.default_rng(0))
        model = train_classifier(train, kind, seed=0)
        s = model.score(test.features)
        assert ((s >= 0) & (s <= 1)).all()
        assert roc_and_metrics(s, test.labels).auc >= 0.95

    def test_deterministic(self):
        train, test = gaussian_sets(np.random.default_rng(1))
        a = train_classifier(train, seed=3).score(test.features)
        b = train_classifier(train, seed=3).score(test.features)
        assert (a == b).all()

    def test_single_class(self):
        s = LabeledEdgeSet(np.arange(4), np.arange(4), np.ones(4, dtype=np.int8), np.zeros((4, 2)))
        with pytest.raises(ClassifierError):
            train_classifier(s)

    def test_feature_dim_checked(self):
        train, _ = gaussian_sets(np.random.default_rng(2), n=100)
        model = train_classifier(train)
        with pytest.raises(ContractError):
            model.score(np.zeros((3, 5)))

    def test_save_load(self, tmp_path):
        train, test = gaussian_sets(np.random.default_rng(3), n=200)
        model = train_classifier(train, seed=5)
        back = Classifier.load(model.save(tmp_path))
        assert back.kind == "tree_ensemble" and back.seed == 5
        assert (back.score(test.features) == model.score(test.features)).all()

    def test_predict_combiner_mismatch(self, toy_graph):
        rng = np.random.default_rng(4)
        emb = EmbeddingMatrix(rng.normal(size=(toy_graph.n_vertices, 3)), toy_graph.n_devices, toy_graph.n_apps)
        train = LabeledEdgeSet(np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3]), np.array([1, 0, 1, 0], dtype=np.int8), provenance={})
        model = train_classifier(train.with_features(emb, "hadamard"))
        assert predict_scores(model, [(0, 1), (2, 2)], emb, "hadamard").shape == (2,)
        with pytest.raises(ContractError):
            predict_scores(model, [(0, 1)], emb, "concat")


class TestExplain:
    def test_direct_neighbor(self, toy_graph):
        d, m = toy_graph.device_index["d1"], toy_graph.app_index["m5"]
        traces = explain_prediction(toy_graph, d, m, walk_budget=200)
        assert traces[0].path == ("d1", "m5") and traces[0].order == 1
        assert sum(t.hits for t in traces) <= 200

    def test_higher_order_paths_valid(self, toy_graph):
        d, m = toy_graph.device_index["d1"], toy_graph.app_index["m3"]
        traces = explain_prediction(toy_graph, d, m, walk_budget=500, seed=2)
        assert traces and all(t.path[-1] == "m3" and len(t.path) == 2 * t.order for t in traces)
        for t in traces:
            for a, b in zip(t.path[:-1], t.path[1:]):
                dv, ap = (a, b) if a.startswith("d") else (b, a)
                assert toy_graph.has_edge(toy_graph.device_index[dv], toy_graph.app_index[ap])

    def test_unreachable(self):
        g = build_graph([ev("d0", "m0"), ev("d1", "m1")])
        assert explain_prediction(g, 0, 1, walk_budget=100) == []

    def test_zero_budget(self, toy_graph):
        assert explain_prediction(toy_graph, 0, 0, walk_budget=0) == []
