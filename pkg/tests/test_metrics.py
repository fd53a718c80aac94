import json

import numpy as np
import pytest
from _oracles import brute_hausdorff, exhaustive_confusion, formulas

from airway_repair.errors import GeometryError, UndefinedMetricError
from airway_repair.metrics import (
    TABLE_COLUMNS,
    TD_GT_RESTRICTED,
    TD_PAPER_RAW,
    ConfusionCounts,
    confusion,
    dice,
    evaluate,
    format_table,
    fpr,
    hausdorff,
    hd95,
    ji,
    tpr,
    tree_detected_rate,
)
from airway_repair.volume import BinaryMask


def M(data, spacing=(1.0, 1.0, 1.0)):
    return BinaryMask(np.asarray(data, bool), spacing)


def scores(c):
    return dice(c), tpr(c), fpr(c), ji(c)


def test_confusion_examples():
    d = np.zeros((3, 3, 3), bool)
    d.flat[[0, 4, 13, 20, 26]] = True
    assert confusion(M(d), M(d)) == ConfusionCounts(5, 0, 0, 22)
    c = confusion(M(np.zeros_like(d)), M(d))
    assert (c.tp, c.fp, c.fn) == (0, 0, 5)
    with pytest.raises(GeometryError):
        confusion(M(d), M(np.zeros((3, 3, 4), bool)))
    with pytest.raises(GeometryError):
        confusion(M(d), M(d, (1, 1, 2)))


def test_confusion_random_matches_exhaustive(rng):
    for _ in range(10):
        p, g = rng.random((2, 8, 8, 8)) < 0.4
        c = confusion(M(p), M(g))
        assert (c.tp, c.fp, c.fn, c.tn) == exhaustive_confusion(p, g)
        assert c.total == 512


def test_score_examples():
    c = ConfusionCounts(1, 1, 1, 0)
    assert dice(c) == 0.5 and ji(c) == pytest.approx(1 / 3, abs=1e-15)
    assert scores(ConfusionCounts(7, 0, 0, 20)) == (1.0, 1.0, 0.0, 1.0)


def test_degenerate_conventions():
    assert scores(ConfusionCounts(0, 0, 0, 8)) == (1.0, 1.0, 0.0, 1.0)
    assert fpr(ConfusionCounts(3, 0, 0, 0)) == 0.0
    assert tpr(ConfusionCounts(0, 4, 0, 4)) == 1.0
    assert dice(ConfusionCounts(0, 4, 0, 4)) == 0.0


def test_scores_match_formula_oracle(rng):
    for _ in range(500):
        c = ConfusionCounts(*[int(v) for v in rng.integers(0, 50, 4)])
        np.testing.assert_allclose(scores(c), formulas(c.tp, c.fp, c.fn, c.tn), rtol=0, atol=1e-12)
        # algebraic identity between the two overlap scores
        assert dice(c) == pytest.approx(2 * ji(c) / (1 + ji(c)), abs=1e-12)


def test_overlap_translation_invariant(rng):
    p, g = rng.random((2, 10, 10, 10)) < 0.3
    p[-3:], g[-3:] = False, False
    shifted = [np.roll(a, 3, axis=0) for a in (p, g)]
    assert scores(confusion(M(p), M(g))) == scores(confusion(M(shifted[0]), M(shifted[1])))


def test_hausdorff_examples():
    a = np.zeros((6, 3, 3), bool)
    b = np.zeros((6, 3, 3), bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert hausdorff(M(a), M(b)) == 3.0
    assert hausdorff(M(a, (0.5, 1, 1)), M(b, (0.5, 1, 1))) == 1.5
    assert hausdorff(M(a), M(a)) == 0.0
    with pytest.raises(UndefinedMetricError):
        hausdorff(M(a), M(np.zeros_like(a)))


def test_hausdorff_random_matches_bruteforce(rng):
    for spacing in [(1.0, 1.0, 1.0), (0.6, 0.8, 1.5)]:
        for _ in range(8):
            p, g = rng.random((2, 10, 10, 10)) < rng.uniform(0.05, 0.5)
            if not p.any() or not g.any():
                continue
            hd = hausdorff(M(p, spacing), M(g, spacing))
            assert abs(hd - brute_hausdorff(p, g, spacing)) < 1e-9
            assert hd == hausdorff(M(g, spacing), M(p, spacing))


def test_hd95_pooled_percentile():
    a = np.zeros((12, 3, 3), bool)
    b = np.zeros((12, 3, 3), bool)
    a[1, 1, 1] = True
    b[1, 1, 1] = b[9, 1, 1] = True
    # directed distances: a->b [0]; b->a [0, 8]; pooled [0, 0, 8]
    assert hd95(M(a), M(b)) == pytest.approx(np.percentile([0, 0, 8], 95))
    assert hd95(M(a), M(b)) <= hausdorff(M(a), M(b))


def _two_branches():
    d = np.zeros((30, 16, 5), bool)
    d[2:28, 3, 2] = True
    d[2:28, 12, 2] = True
    return d


def test_td_examples():
    gt = _two_branches()
    assert tree_detected_rate(M(gt), M(gt), TD_PAPER_RAW) == pytest.approx(1.0)
    assert tree_detected_rate(M(gt), M(gt), TD_GT_RESTRICTED) == pytest.approx(1.0)
    half = gt.copy()
    half[:, 12] = False
    assert tree_detected_rate(M(half), M(gt)) == pytest.approx(0.5)
    with pytest.raises(UndefinedMetricError):
        tree_detected_rate(M(gt), M(np.zeros_like(gt)))
    with pytest.raises(ValueError):
        tree_detected_rate(M(gt), M(gt), "bogus")


def test_td_false_branch_modes():
    gt = _two_branches()
    pred = gt.copy()
    pred[14, 3:13, 2] = True  # bridge between the branches
    pred[14, 12, 2:5] = True
    pred[27, 3:16, 2] = True  # long false branch outside the gt
    raw = tree_detected_rate(M(pred), M(gt), TD_PAPER_RAW)
    restricted = tree_detected_rate(M(pred), M(gt), TD_GT_RESTRICTED)
    assert raw > restricted


def test_evaluate_report(phantom3):
    gt = phantom3.gt_mask
    rep = evaluate(gt, gt, with_hd95=True)
    assert (rep.dice, rep.tpr, rep.fpr, rep.ji, rep.hd_mm) == (1.0, 1.0, 0.0, 1.0, 0.0)
    assert rep.td == pytest.approx(1.0) and rep.td_paper_raw == pytest.approx(1.0)
    assert rep.hd95_mm == 0.0
    doc = json.loads(json.dumps(rep.to_json()))
    assert doc["schema_version"] == 1 and doc["definitions_version"]
    assert doc["fpr"] == 0.0 and doc["td_mode"] == TD_GT_RESTRICTED
    assert evaluate(gt, gt).hd95_mm is None


def test_evaluate_largest_component():
    gt = np.zeros((20, 20, 20), bool)
    gt[3:15, 8:12, 8:12] = True
    pred = gt.copy()
    pred[18, 18, 18] = True  # stray voxel far away
    with_cc = evaluate(M(pred), M(gt))
    without = evaluate(M(pred), M(gt), largest_cc=False)
    assert with_cc.hd_mm == 0.0 and with_cc.fpr == 0.0
    assert without.hd_mm > 5 and without.fpr > 0
    assert not without.largest_component


def test_table_scales_fpr_only_in_view():
    c = ConfusionCounts(10, 3, 2, 9985)
    rep = evaluate(M(np.ones((2, 2, 2))), M(np.ones((2, 2, 2))))
    rep = type(rep)(**{**rep.__dict__, "fpr": fpr(c)})
    text = format_table([rep], ["case1"])
    head, row = text.strip().splitlines()
    assert [h.strip() for h in head.split("  ") if h.strip()] == ["case"] + list(TABLE_COLUMNS)
    assert f"{fpr(c) * 1e4:.4f}" in row
    assert rep.to_json()["fpr"] == fpr(c)
