import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phagraph.metrics import FPR_TARGETS, MetricError, roc_and_metrics, write_report


def oracle(scores, labels, targets=FPR_TARGETS):
    """Exhaustive enumeration: every distinct score as a ">=" threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    P, N = labels.sum(), (~labels).sum()
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        pts.append(((pred & ~labels).sum() / N, (pred & labels).sum() / P))
    # AUC as the pairwise probability with ties counted half
    pos, neg = scores[labels], scores[~labels]
    auc = ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (P * N)
    tpr_at = {t: max(tp for fp, tp in pts if fp <= t) for t in targets}
    return auc, tpr_at


score_lists = st.integers(2, 200).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 30), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
    )
).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


class TestRocOracle:
    @settings(max_examples=100, deadline=None)
    @given(score_lists)
    def test_matches_enumeration(self, data):
        scores, labels = data
        scores = np.asarray(scores) / 7.0
        rep = roc_and_metrics(scores, labels, targets=(1e-4, 1e-3, 5e-3, 0.1, 0.3))
        auc, tpr_at = oracle(scores, labels, targets=(1e-4, 1e-3, 5e-3, 0.1, 0.3))
        assert abs(rep.auc - auc) <= 1e-9
        assert rep.tpr_at == tpr_at

    def test_continuous_scores(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = rng.integers(2, 200)
            labels = rng.random(n) < 0.5
            labels[0], labels[1] = True, False
            scores = rng.normal(size=n) + labels
            auc, tpr_at = oracle(scores, labels)
            rep = roc_and_metrics(scores, labels)
            assert abs(rep.auc - auc) <= 1e-9
            assert rep.tpr_at == tpr_at


class TestProperties:
    def test_separable(self):
        rep = roc_and_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert rep.auc == 1.0 and rep.ap == 1.0
        assert all(v == 1.0 for v in rep.tpr_at.values())

    def test_reversed(self):
        assert roc_and_metrics([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]).auc == 0.0

    def test_all_tied(self):
        rep = roc_and_metrics(np.zeros(10), [1, 0] * 5)
        assert rep.auc == 0.5
        assert rep.tpr_at[1e-3] == 0.0

    def test_random_scores_half(self):
        rng = np.random.default_rng(1)
        rep = roc_and_metrics(rng.random(20000), rng.random(20000) < 0.5)
        assert abs(rep.auc - 0.5) <= 0.02

    def test_ap_by_hand(self):
        # ranking 1, 0, 1: precision 1 at recall 1/2, 2/3 at recall 1
        rep = roc_and_metrics([3, 2, 1], [1, 0, 1])
        assert rep.ap == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)

    def test_curve_monotone(self):
        rng = np.random.default_rng(2)
        rep = roc_and_metrics(rng.random(300), rng.random(300) < 0.3)
        assert (np.diff(rep.roc, axis=0) >= 0).all()
        assert tuple(rep.roc[0]) == (0.0, 0.0) and tuple(rep.roc[-1]) == (1.0, 1.0)
        assert 0.0 <= rep.ap <= 1.0

    def test_counts_consistent(self):
        rng = np.random.default_rng(3)
        labels = rng.random(5000) < 0.5
        rep = roc_and_metrics(rng.random(5000) + labels, labels)
        for t, pt in rep.counts.items():
            assert pt.tp + pt.fn == labels.sum()
            assert pt.fp + pt.tn == (~labels).sum()
            assert pt.fpr <= t and pt.tpr == rep.tpr_at[t]

    @pytest.mark.parametrize(
        "scores,labels",
        [([1, 2], [1, 1]), ([1, 2], [0, 0]), ([1.0, np.nan], [1, 0]), ([1, 2, 3], [1, 0])],
    )
    def test_invalid(self, scores, labels):
        with pytest.raises(MetricError):
            roc_and_metrics(scores, labels)


def test_report_json(tmp_path):
    rep = roc_and_metrics([0.9, 0.1, 0.5], [1, 0, 1], meta={"method": "x", "seed": np.int64(3)})
    write_report(tmp_path / "r.json", [rep], {"kind": "t"})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["kind"] == "t"
    assert doc["reports"][0]["metrics"]["auc"] == 1.0
    assert doc["reports"][0]["meta"]["seed"] == 3
    rep.write_roc(tmp_path / "roc.csv")
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "fpr,tpr"
