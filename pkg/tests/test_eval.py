import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panoda.datamodel import IGNORE
from panoda.eval import (ConfusionMatrix, MetricsError, accumulate, angle_slices, evaluate_predictions,
                         iou_report, markdown_table, omnidirectional, omnidirectional_matrices,
                         write_metrics_csv)


def brute_force_miou(preds, gts, c):
    inter, union = np.zeros(c), np.zeros(c)
    for p_img, g_img in zip(preds, gts):
        for p, g in zip(p_img.ravel(), g_img.ravel()):
            if g == IGNORE:
                continue
            for k in range(c):
                inter[k] += (p == k) and (g == k)
                union[k] += (p == k) or (g == k)
    present = union > 0
    return float(np.mean(inter[present] / union[present])), [inter[k] / union[k] if present[k] else None
                                                              for k in range(c)]


def test_diagonal_count():
    cm = accumulate(ConfusionMatrix.zeros(3), np.ones((2, 2)), np.ones((2, 2)))
    assert cm.counts[1, 1] == 4 and cm.total == 4


def test_all_ignore_leaves_matrix():
    cm = accumulate(ConfusionMatrix.zeros(3), np.zeros((2, 2)), np.full((2, 2), IGNORE))
    assert cm.total == 0


def test_errors():
    with pytest.raises(MetricsError):
        accumulate(ConfusionMatrix.zeros(3), np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(MetricsError):
        accumulate(ConfusionMatrix.zeros(3), np.full((2, 2), 5), np.zeros((2, 2)))
    with pytest.raises(MetricsError):
        iou_report(ConfusionMatrix.zeros(3))
    with pytest.raises(MetricsError):
        angle_slices(100)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_brute_force_on_4x4(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 3, (4, 4)) for _ in range(3)]
    gts = [np.where(rng.random((4, 4)) < 0.1, IGNORE, rng.integers(0, 3, (4, 4))) for _ in range(3)]
    cm = ConfusionMatrix.zeros(3)
    for p, g in zip(preds, gts):
        accumulate(cm, p, g)
    tally = np.zeros((3, 3), int)
    for p, g in zip(preds, gts):
        for pp, gg in zip(p.ravel(), g.ravel()):
            if gg != IGNORE:
                tally[gg, pp] += 1
    assert np.array_equal(cm.counts, tally)
    rep = iou_report(cm)
    miou, per_class = brute_force_miou(preds, gts, 3)
    assert rep["miou"] == pytest.approx(miou, abs=1e-12)
    assert rep["per_class"] == pytest.approx(per_class)


def test_perfect_and_hand_case():
    gt = np.array([[0, 1], [2, 2]])
    rep = iou_report(accumulate(ConfusionMatrix.zeros(4), gt, gt))
    assert rep["miou"] == 1.0 and rep["per_class"][3] is None
    cm = ConfusionMatrix(np.array([[3, 1], [1, 0]]))
    # class 0: TP 3, FP 1, FN 1
    assert iou_report(cm)["per_class"][0] == pytest.approx(0.6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_order_independence_and_relabeling(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 4, (4, 8)) for _ in range(5)]
    gts = [rng.integers(0, 4, (4, 8)) for _ in range(5)]
    a, b = ConfusionMatrix.zeros(4), ConfusionMatrix.zeros(4)
    for p, g in zip(preds, gts):
        accumulate(a, p, g)
    for i in rng.permutation(5):
        accumulate(b, preds[i], gts[i])
    assert np.array_equal(a.counts, b.counts)
    perm = rng.permutation(4)
    c = ConfusionMatrix.zeros(4)
    for p, g in zip(preds, gts):
        accumulate(c, perm[p], perm[g])
    assert iou_report(c)["miou"] == pytest.approx(iou_report(a)["miou"], abs=1e-12)


def test_angle_slices():
    assert all(s.stop - s.start == 256 for s in angle_slices(2048))
    assert angle_slices(128)[1] == slice(16, 32)


def test_uniform_predictions_equal_angles():
    gts = [np.tile(np.arange(16) % 3, (4, 8)) for _ in range(2)]
    preds = [np.zeros_like(g) for g in gts]
    vals = omnidirectional(preds, gts, 3)
    assert len(vals) == 8 and len(set(vals)) == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_angle_matrices_merge_to_global(seed):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, 5, (4, 32)) for _ in range(3)]
    gts = [np.where(rng.random((4, 32)) < 0.1, IGNORE, rng.integers(0, 5, (4, 32))) for _ in range(3)]
    mats = omnidirectional_matrices(preds, gts, 5)
    glob = ConfusionMatrix.zeros(5)
    for p, g in zip(preds, gts):
        accumulate(glob, p, g)
    assert np.array_equal(sum(m.counts for m in mats), glob.counts)


def test_report_outputs(tmp_path):
    rng = np.random.default_rng(0)
    preds = [rng.integers(0, 3, (8, 16)) for _ in range(2)]
    gts = [rng.integers(0, 3, (8, 16)) for _ in range(2)]
    rep = evaluate_predictions(preds, gts, 3)
    write_metrics_csv(tmp_path / "m.csv", {"a": rep})
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0].startswith("model,miou,iou_0") and text[1].startswith("a,")
    table = markdown_table({"a": rep}, ["x", "y", "z"])
    assert "| Method | mIoU | x | y | z |" in table and "0-45" in table
