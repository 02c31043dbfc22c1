import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score, roc_auc_score

from common.errors import RejectedInputError, UndefinedMetricError
from common.metrics import (
    ScoredPrefix,
    ScoredPrefixSet,
    TrajectoryScores,
    aggregate_reports,
    auroc,
    average_precision,
    brier,
    confusion_at,
    ece,
    first_alert,
    first_alert_diagnostics,
    metrics_report,
    precision_recall_points,
    roc_points,
)


def brute_ap(labels, scores):
    total = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for th in sorted(set(scores.tolist()), reverse=True):
        alert = scores >= th
        tp = labels[alert].sum()
        recall = tp / total
        ap += (recall - prev_recall) * (tp / alert.sum())
        prev_recall = recall
    return ap


def brute_auroc(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (pos.size * neg.size)


def brute_ece(labels, scores, bins=15):
    edges = np.linspace(0.0, 1.0, bins + 1)
    total = 0.0
    for m in range(bins):
        lo, hi = edges[m], edges[m + 1]
        members = [i for i, s in enumerate(scores) if (lo < s <= hi) or (m == 0 and s == 0.0)]
        if members:
            total += len(members) / len(scores) * abs(labels[members].mean() - scores[members].mean())
    return total


def random_sets(count=50):
    rng = np.random.default_rng(2024)
    for i in range(count):
        n = int(rng.integers(2, 400))
        labels = (rng.random(n) < rng.uniform(0.05, 0.6)).astype(np.int64)
        labels[0], labels[1] = 1, 0
        if i % 3 == 0:
            scores = rng.integers(0, 5, size=n) / 4.0
        else:
            scores = rng.random(n)
        yield labels, scores


def test_ranking_metrics_match_brute_force_and_sklearn():
    for labels, scores in random_sets():
        ap = average_precision(labels, scores)
        assert ap == pytest.approx(brute_ap(labels, scores), abs=1e-12)
        assert ap == pytest.approx(average_precision_score(labels, scores), abs=1e-12)
        roc = auroc(labels, scores)
        assert roc == pytest.approx(brute_auroc(labels, scores), abs=1e-12)
        assert roc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_calibration_metrics_match_brute_force():
    for labels, scores in random_sets():
        assert ece(labels, scores) == pytest.approx(brute_ece(labels, scores), abs=1e-12)
        assert brier(labels, scores) == pytest.approx(np.mean((scores - labels) ** 2), abs=1e-12)


def test_ranking_metrics_need_both_classes():
    with pytest.raises(UndefinedMetricError):
        average_precision([1, 1], [0.2, 0.3])
    with pytest.raises(UndefinedMetricError):
        auroc([0, 0], [0.2, 0.3])
    with pytest.raises(RejectedInputError):
        average_precision([], [])
    assert ece([0, 0], [0.0, 1.0]) == pytest.approx(0.5)


def test_tied_block_enters_together():
    labels = np.array([1, 0, 1, 0])
    scores = np.array([0.5, 0.5, 0.5, 0.1])
    assert average_precision(labels, scores) == pytest.approx(2 / 3)
    points = precision_recall_points(labels, scores)
    assert [p["recall"] for p in points] == [1.0, 1.0]
    roc = roc_points(labels, scores)
    assert roc[0]["threshold"] == math.inf and roc[-1]["tpr"] == 1.0 and roc[-1]["fpr"] == 1.0


def test_confusion_at_undefined_ratios_are_none():
    point = confusion_at([0, 0, 1], [0.1, 0.2, 0.3], math.inf)
    assert (point.tp, point.fp, point.tn, point.fn) == (0, 0, 2, 1)
    assert point.precision is None
    assert point.recall == 0.0
    assert point.to_dict()["threshold"] == "inf"
    assert confusion_at([1, 0], [0.9, 0.1], 0.5).f1 == 1.0
    with pytest.raises(RejectedInputError):
        confusion_at([1, 0], [0.9, 0.1], float("nan"))


def test_first_alert_three_trajectory_case():
    series = [
        TrajectoryScores("ok", 1, (0.1, 0.9, 0.1, 0.1)),
        TrajectoryScores("early", 0, (0.1, 0.8) + (0.1,) * 8),
        TrajectoryScores("missed", 0, (0.1,) * 10),
    ]
    report = first_alert_diagnostics(series, threshold=0.5, horizon=3)
    assert report.far == 1.0
    assert report.fail_alert_recall == 0.5
    assert report.early_fail_recall == 0.5
    assert report.alert_precision == 0.5
    assert report.lead_time == pytest.approx(((10 - 2) / 10 + 0.0) / 2)
    assert report.alerted == 2


def test_first_alert_index_and_late_alert():
    assert first_alert([0.1, 0.5, 0.9], 0.5) == 2
    assert first_alert([0.1, 0.2], 0.5) is None
    late = first_alert_diagnostics([TrajectoryScores("f", 0, (0.0,) * 7 + (0.9,) * 3)], 0.5, 3)
    assert late.fail_alert_recall == 1.0
    assert late.early_fail_recall == 0.0
    assert late.far is None
    assert late.lead_time == pytest.approx(2 / 10)


def test_scored_prefix_set_validation_and_abstention():
    records = [
        ScoredPrefix("a", 1, 2, 0, 0, 0.2),
        ScoredPrefix("a", 2, 2, 0, 1, 0.7, abstain=True),
        ScoredPrefix("b", 1, 1, 1, 0, 0.1),
        ScoredPrefix("c", 1, 1, 0, 1, 0.9),
    ]
    prefixes = ScoredPrefixSet(records)
    report = metrics_report(prefixes, {"half": 0.5})
    assert report["n"] == 3 and report["abstained"] == 1
    assert report["auprc"] == 1.0
    assert report["operating_points"]["half"]["tp"] == 1
    with pytest.raises(RejectedInputError):
        ScoredPrefixSet(records + [ScoredPrefix("a", 1, 2, 0, 0, 0.3)])
    with pytest.raises(RejectedInputError):
        ScoredPrefixSet([ScoredPrefix("x", 1, 1, 1, 0, 1.5)])


def test_metrics_report_single_class_gives_null_ranking():
    prefixes = ScoredPrefixSet([ScoredPrefix("a", 1, 1, 1, 0, 0.3), ScoredPrefix("b", 1, 1, 1, 0, 0.4)])
    report = metrics_report(prefixes)
    assert report["auprc"] is None and report["auroc"] is None
    assert report["brier"] == pytest.approx((0.09 + 0.16) / 2)


def test_metrics_report_with_every_prefix_abstained():
    prefixes = ScoredPrefixSet([ScoredPrefix("a", t, 3, 0, int(t == 3), 0.2, abstain=True) for t in (1, 2, 3)])
    report = metrics_report(prefixes, {"f1": 0.5})
    assert report["n"] == 0 and report["abstained"] == 3
    assert report["positive_rate"] is None
    for key in ("auprc", "auroc", "ece", "brier"):
        assert report[key] is None
    assert report["operating_points"] == {}
    assert metrics_report(ScoredPrefixSet([]))["n"] == 0


def test_aggregate_reports_mean_and_std():
    out = aggregate_reports([{"auprc": 0.8, "nested": {"x": 1}}, {"auprc": 0.6, "nested": {"x": 3}, "only": 1}])
    assert out["auprc"]["mean"] == pytest.approx(0.7)
    assert out["auprc"]["std"] == pytest.approx(math.sqrt(0.02))
    assert out["nested"]["x"]["mean"] == 2.0
    assert "only" not in out
