#!/usr/bin/env python3
"""
Tests for ROC/PR sweeps, AUC/AP, confusion counts and curve export.
"""

import json
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataset import PatchSet
from errors import DatasetError
from evaluate import (
    EvalCurve,
    ScoredLabelSet,
    confusion_at,
    evaluate,
    export_curves,
    format_eval_report,
    precision_recall,
    read_curve_csv,
    roc,
    score_patches,
)
from network import squeezenet_config, zero_model


def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def test_perfect_separation():
    data = ScoredLabelSet(scores=[0.9, 0.8, 0.3, 0.1], labels=[1, 1, 0, 0])
    curve = evaluate(data)
    assert curve.auc == 1.0
    assert curve.ap == 1.0
    assert curve.points[0].threshold == math.inf
    assert (curve.points[0].tpr, curve.points[0].fpr, curve.points[0].precision) == (0.0, 0.0, 1.0)
    assert (curve.points[-1].tpr, curve.points[-1].fpr) == (1.0, 1.0)


def test_all_ties():
    data = ScoredLabelSet(scores=[0.5] * 10, labels=[1, 0, 0, 1, 0, 0, 0, 1, 0, 0])
    curve = evaluate(data)
    assert curve.auc == 0.5
    assert abs(curve.ap - 0.3) < 1e-12
    assert len(curve.points) == 2


def brute_force_ap(scores, labels):
    total, last_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= t
        tp = np.sum(predicted & (labels == 1))
        recall = tp / np.sum(labels == 1)
        total += (recall - last_recall) * tp / np.sum(predicted)
        last_recall = recall
    return total


def random_instances(seed, count=200, max_n=50):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        n = int(rng.integers(2, max_n + 1))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        # coarse grid so ties across classes are common
        scores = rng.integers(0, 6, size=n) / 5.0
        yield scores, labels


def test_auc_matches_pairwise_count():
    for scores, labels in random_instances(0):
        curve = roc(ScoredLabelSet(scores=scores, labels=labels))
        assert abs(curve.auc - pairwise_auc(scores, labels)) < 1e-9
        assert curve.ap is None


def test_ap_matches_threshold_sweep():
    for scores, labels in random_instances(3):
        curve = precision_recall(ScoredLabelSet(scores=scores, labels=labels))
        assert abs(curve.ap - brute_force_ap(scores, labels)) < 1e-9


def test_auc_invariant_under_monotone_transform():
    for scores, labels in random_instances(4, count=50):
        base = roc(ScoredLabelSet(scores=scores, labels=labels)).auc
        for transformed in (np.exp(3.0 * scores), scores ** 3 - 7.0, 1.0 / (2.0 - scores)):
            assert abs(roc(ScoredLabelSet(scores=transformed, labels=labels)).auc - base) < 1e-9


def test_reversed_labels_give_complement():
    for scores, labels in random_instances(5, count=50):
        auc = roc(ScoredLabelSet(scores=scores, labels=labels)).auc
        flipped = roc(ScoredLabelSet(scores=scores, labels=1 - labels)).auc
        assert abs(flipped - (1.0 - auc)) < 1e-9


def test_sweep_matches_confusion():
    rng = np.random.default_rng(1)
    scores = rng.integers(0, 10, size=50) / 9.0
    labels = rng.integers(0, 2, size=50)
    labels[:2] = [0, 1]
    data = ScoredLabelSet(scores=scores, labels=labels)
    curve = precision_recall(data)
    assert curve.auc is None
    thresholds = [p.threshold for p in curve.points[1:]]
    assert thresholds == sorted(set(scores.tolist()), reverse=True)
    for point in curve.points[1:]:
        c = confusion_at(data, point.threshold)
        assert point.tpr == c.tp / data.positives
        assert point.fpr == c.fp / data.negatives
        assert abs(point.precision - c.precision) < 1e-12
    tprs = [p.tpr for p in curve.points]
    fprs = [p.fpr for p in curve.points]
    assert tprs == sorted(tprs) and fprs == sorted(fprs)


def test_one_class_is_rejected():
    with pytest.raises(DatasetError):
        evaluate(ScoredLabelSet(scores=[0.1, 0.2], labels=[1, 1]))


def test_confusion_fixture():
    data = ScoredLabelSet(scores=[0.95, 0.8, 0.6, 0.4, 0.3, 0.1], labels=[1, 0, 1, 1, 0, 0])
    c = confusion_at(data, 0.5)
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 2, 1)
    assert abs(c.precision - 2 / 3) < 1e-12
    assert abs(c.recall - 2 / 3) < 1e-12
    assert abs(c.accuracy - 4 / 6) < 1e-12
    assert abs(c.f1 - 2 / 3) < 1e-12

    everything = confusion_at(data, 0.0)
    assert (everything.tp, everything.fp, everything.recall) == (3, 3, 1.0)
    nothing = confusion_at(data, 0.99)
    assert (nothing.tp, nothing.fp, nothing.precision, nothing.f1) == (0, 0, 0.0, 0.0)


def test_csv_export_parses_and_reexports(tmp_path):
    rng = np.random.default_rng(2)
    data = ScoredLabelSet(scores=rng.random(40), labels=np.array([0, 1] * 20))
    curve = evaluate(data)
    csv_path, json_path = export_curves(curve, str(tmp_path / "m_curves.csv"))
    assert json_path == str(tmp_path / "m_curves.json")

    with open(csv_path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == "threshold,fpr,tpr,precision,recall"
    assert lines[1] == "inf,0,0,1,0"

    points = read_curve_csv(csv_path)
    assert len(points) == len(curve.points)
    for parsed, original in zip(points, curve.points):
        assert parsed.tpr == pytest.approx(original.tpr, rel=1e-5)
        assert parsed.threshold == pytest.approx(original.threshold, rel=1e-5)

    again = EvalCurve(points=points, auc=curve.auc, ap=curve.ap, positives=curve.positives, negatives=curve.negatives)
    second_csv, _ = export_curves(again, str(tmp_path / "again.csv"))
    with open(csv_path, "rb") as a, open(second_csv, "rb") as b:
        assert a.read() == b.read()

    with open(json_path, encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["positives"] == 20 and summary["thresholds"] == len(curve.points) - 1
    # summary numbers carry the same 6 significant digits as the CSV
    assert summary["auc"] == float(format(curve.auc, ".6g"))
    assert summary["ap"] == float(format(curve.ap, ".6g"))
    assert len(repr(summary["ap"]).replace("0.", "", 1).lstrip("0")) <= 6

    rates = confusion_at(ScoredLabelSet(scores=[0.9, 0.8, 0.2], labels=[1, 0, 1]), 0.5).to_dict()
    assert rates["precision"] == 0.5 and rates["f1"] == 0.5
    assert rates["accuracy"] == 0.333333
    assert rates["tp"] == 1


def test_score_patches_and_report():
    model = zero_model(squeezenet_config())
    patches = PatchSet(patches=np.zeros((6, 3, 20, 20), dtype=np.float32), labels=[0, 1, 0, 1, 0, 1])
    scored = score_patches(model, patches, batch_size=4)
    np.testing.assert_allclose(scored.scores, 0.5)
    curve = evaluate(scored)
    assert curve.auc == 0.5

    text = format_eval_report([("zero", curve)], 0.5, [confusion_at(scored, 0.5)])
    assert "zero" in text and "prec@0.5" in text

    with pytest.raises(DatasetError):
        score_patches(model, PatchSet.empty(20, 3))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
