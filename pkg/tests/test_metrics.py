import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from iflab.metrics import (
    MetricsReport,
    average_precision,
    orient,
    pseudo_label,
    recall_at_s,
    relabel,
    relabel_all,
    relabel_from_scores,
    roc_auc,
)


def test_roc_auc_example():
    assert roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.75)
    assert roc_auc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0], "lower_is_noisier") == pytest.approx(0.25)
    assert roc_auc([1.0, 1.0], [1, 0]) == 0.5


def test_average_precision_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6)
    n = 7
    s = np.arange(n, 0, -1, dtype=float)
    flags = np.zeros(n, int)
    flags[-1] = 1
    assert average_precision(s, flags) == pytest.approx(1 / n)


def test_degenerate_labels_rejected():
    for f in ([1, 1], [0, 0]):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], f)
        with pytest.raises(ValueError):
            average_precision([0.1, 0.2], f)
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2, 0.3], [1, 0])


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_sklearn(seed):
    gen = np.random.default_rng(seed)
    s = gen.standard_normal(300)
    f = gen.random(300) < 0.3
    assert roc_auc(s, f) == pytest.approx(roc_auc_score(f, s), abs=1e-12)
    assert average_precision(s, f) == pytest.approx(average_precision_score(f, s), abs=1e-12)
    # heavy ties
    t = np.round(s, 0)
    assert roc_auc(t, f) == pytest.approx(roc_auc_score(f, t), abs=1e-12)
    assert average_precision(t, f) == pytest.approx(average_precision_score(f, t), abs=1e-12)


def test_orient():
    np.testing.assert_array_equal(orient([1, -2], "lower_is_noisier"), [-1, 2])
    with pytest.raises(ValueError):
        orient([1], "sideways")


def test_relabel_from_scores():
    assert relabel_from_scores([3.0, 1.0]) == (0, False)
    assert relabel_from_scores([3.0, 1.0], "higher_is_noisier") == (1, False)
    assert relabel_from_scores([2.0, 2.0, 1.0]) == (0, True)


class _Ctx:
    direction = "lower_is_noisier"

    def score(self, X, y):
        # helpfulness peaks when the label equals round(x0)
        return -np.abs(X[:, 0] - y)


class _Broken(_Ctx):
    def score(self, X, y):
        raise ArithmeticError("boom")


def test_relabel_with_context():
    assert relabel([2.1, 0.0], 4, _Ctx()) == (2, False)
    labels, ties = relabel_all(np.array([[0.0], [3.0], [1.5]]), 4, _Ctx())
    np.testing.assert_array_equal(labels, [0, 3, 1])
    np.testing.assert_array_equal(ties, [False, False, True])
    with pytest.raises(ValueError):
        relabel([0.0], 1, _Ctx())
    with pytest.raises(RuntimeError, match="candidate labels"):
        relabel([0.0], 2, _Broken())


def test_recall_examples():
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    labels = np.array([1, 1, 0, 1, 0])
    assert recall_at_s(scores, labels, 1, 2) == 1.0
    assert recall_at_s(scores, labels, 1, 5) == pytest.approx(0.6)
    assert recall_at_s(scores, labels, 0, 2, direction="smallest") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        recall_at_s(scores, labels, 1, 0)
    with pytest.raises(ValueError):
        recall_at_s(scores, labels, 1, 6)


def test_pseudo_label():
    np.testing.assert_array_equal(pseudo_label([0, 2, 2, 1], 2), [0, 1, 1, 0])


def test_metrics_report_aggregate():
    rep = MetricsReport.aggregate([{"roc_auc": 0.8, "average_precision": 0.5},
                                   {"roc_auc": 0.6, "average_precision": 0.7,
                                    "relabel_top1": 0.9}])
    assert rep.roc_auc == pytest.approx(0.7)
    assert rep.mean_std["roc_auc"]["std"] == pytest.approx(0.1)
    assert rep.relabel_top1 == pytest.approx(0.9)
    assert rep.recall_at_s is None
    d = rep.to_json()
    assert d["version"] == "iflab-metrics-1" and len(d["per_seed"]) == 2
    with pytest.raises(ValueError):
        MetricsReport.aggregate([])
