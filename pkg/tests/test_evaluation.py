import numpy as np
import pytest
from hypothesis import given, strategies as st

from cellpr.boxes import BoundingBox, Detection, iou
from cellpr.evaluation import (UndefinedRatioError, average_precision, classification_metrics, classify_celiac,
                               counting_report, evaluate_detections, match_detections, q_ratio)


def det(box, cls=0, conf=0.9):
    return Detection(BoundingBox(*box), cls, conf)


# ---------------------------------------------------------------- matching

def box_with_iou(target):
    # 10x10 gold at the origin; a 10x10 box shifted by s along x has IoU (10-s)/(10+s)
    s = 10 * (1 - target) / (1 + target)
    return (s, 0, 10 + s, 10)


@pytest.mark.parametrize("thr,tp,fp,fn", [(0.5, 1, 0, 0), (0.7, 0, 1, 1)])
def test_single_prediction_at_iou_point_six(thr, tp, fp, fn):
    pred = det(box_with_iou(0.6))
    assert iou(pred.box, BoundingBox(0, 0, 10, 10)) == pytest.approx(0.6)
    m = match_detections([pred], [(0, BoundingBox(0, 0, 10, 10))], thr)
    assert (m.tp, m.fp, m.fn) == (tp, fp, fn)


def test_matching_respects_class():
    m = match_detections([det((0, 0, 10, 10), cls=1)], [(0, BoundingBox(0, 0, 10, 10))])
    assert m.tp == 0 and m.fp == 1 and m.fn == 1


def test_higher_confidence_matches_first():
    gold = [(0, BoundingBox(0, 0, 10, 10))]
    m = match_detections([det((0, 0, 10, 10), conf=0.3), det((1, 0, 11, 10), conf=0.8)], gold)
    assert m.matches == [(1, 0)] and m.false_positives == [0]


def max_matching(preds, golds, thr):
    """Exhaustive maximum bipartite matching on the IoU >= thr, same-class graph."""
    edges = [[g for g, (gc, gb) in enumerate(golds) if gc == p.class_id and iou(p.box, gb) >= thr] for p in preds]

    def best(i, used):
        if i == len(preds):
            return 0
        out = best(i + 1, used)
        for g in edges[i]:
            if g not in used:
                out = max(out, 1 + best(i + 1, used | {g}))
        return out

    return best(0, frozenset())


def test_greedy_matches_exhaustive_assignment_when_separated():
    rng = np.random.default_rng(0)
    for _ in range(50):
        golds = [(int(rng.integers(0, 2)), BoundingBox(40 * k, 0, 40 * k + 12, 12)) for k in range(10)]
        preds = []
        for c, b in golds:
            if rng.random() < 0.6:
                a = b.as_array() + rng.uniform(-1.5, 1.5, 4)
                cls = c if rng.random() < 0.8 else 1 - c
                preds.append(Detection(BoundingBox.from_array(a), cls, float(rng.random())))
        while len(preds) < 10:
            x = 40 * rng.integers(0, 10) + 20
            preds.append(Detection(BoundingBox(x, 0, x + 10, 10), int(rng.integers(0, 2)), float(rng.random())))
        m = match_detections(preds, golds, 0.5)
        assert m.tp == max_matching(preds, golds, 0.5)


@given(st.integers(0, 10_000))
def test_matching_is_a_valid_partial_assignment(seed):
    rng = np.random.default_rng(seed)
    golds = [(int(rng.integers(0, 2)), BoundingBox(*rng.uniform(0, 30, 2), *rng.uniform(30, 60, 2)))
             for _ in range(rng.integers(0, 6))]
    preds = [Detection(BoundingBox(*rng.uniform(0, 30, 2), *rng.uniform(30, 60, 2)), int(rng.integers(0, 2)),
                       float(rng.random())) for _ in range(rng.integers(0, 6))]
    m = match_detections(preds, golds, 0.3)
    ps, gs = [p for p, _ in m.matches], [g for _, g in m.matches]
    assert len(set(ps)) == len(ps) and len(set(gs)) == len(gs)
    assert all(preds[p].class_id == golds[g][0] for p, g in m.matches)
    assert m.tp + m.fp == len(preds) and m.tp + m.fn == len(golds)


# ---------------------------------------------------------------- AP

def test_ap_extremes():
    assert average_precision([0.9, 0.8, 0.7], [True, True, True], 3) == 1.0
    assert average_precision([0.9, 0.8], [False, False], 3) == 0.0
    assert average_precision([], [], 2) == 0.0
    with pytest.raises(ValueError):
        average_precision([0.5], [True], 0)


def test_ap_hand_worked_curves():
    # TP, FP, TP, TP, FP over 3 golds: envelope 1 on [0, 1/3], 0.75 on (1/3, 1]
    assert average_precision([0.9, 0.8, 0.7, 0.6, 0.5], [1, 0, 1, 1, 0], 3) == pytest.approx(1 / 3 + 2 / 3 * 0.75)
    # two hits out of four golds
    assert average_precision([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0], 4) == pytest.approx(0.5)
    # a miss ranked above the only hit
    assert average_precision([0.9, 0.8], [0, 1], 1) == pytest.approx(0.5)


def test_ap_unchanged_by_trailing_false_positives():
    rng = np.random.default_rng(1)
    for _ in range(30):
        conf = rng.uniform(0.2, 1.0, 8)
        hits = rng.random(8) < 0.6
        base = average_precision(conf, hits, 10)
        extra = average_precision(np.concatenate([conf, rng.uniform(0, 0.1, 5)]),
                                  np.concatenate([hits, np.zeros(5, bool)]), 10)
        assert extra == pytest.approx(base, abs=1e-15)
        assert 0.0 <= base <= 1.0


def test_class_without_gold_is_excluded_with_warning():
    preds = [[det((0, 0, 10, 10), 0, 0.9), det((20, 20, 30, 30), 1, 0.8)]]
    golds = [[(0, BoundingBox(0, 0, 10, 10))]]
    with pytest.warns(RuntimeWarning):
        m = evaluate_detections(preds, golds, 2)
    assert m.per_class[1].ap is None and m.map == 1.0


def test_dataset_metrics():
    preds = [[det((0, 0, 10, 10), 0, 0.9), det((50, 50, 60, 60), 0, 0.4)], [det((0, 0, 10, 10), 1, 0.7)]]
    golds = [[(0, BoundingBox(0, 0, 10, 10)), (1, BoundingBox(30, 30, 40, 40))], [(1, BoundingBox(0, 0, 10, 10))]]
    m = evaluate_detections(preds, golds, 2, count_threshold=0.5)
    assert [c.tp for c in m.per_class] == [1, 1] and [c.fp for c in m.per_class] == [0, 0]
    assert m.per_class[1].fn == 1 and m.recall == pytest.approx(2 / 3) and m.precision == 1.0
    assert m.per_class[0].ap == 1.0 and m.per_class[1].ap == pytest.approx(0.5)


# ---------------------------------------------------------------- counting

def test_counting_examples():
    perfect = counting_report([("a", [det((0, 0, 1, 1))])], [("a", [(0, BoundingBox(0, 0, 1, 1))])], 1)
    assert perfect.mae[0] == 0 and perfect.mre[0] == 0
    g1 = [(0, BoundingBox(0, 0, 1, 1))] * 10
    g2 = [(0, BoundingBox(0, 0, 1, 1))] * 20
    p1 = [det((0, 0, 1, 1))] * 12
    p2 = [det((0, 0, 1, 1))] * 16
    rep = counting_report([("a", p1), ("b", p2)], [("a", g1), ("b", g2)], 1)
    assert rep.mae[0] == 3 and rep.mre[0] == pytest.approx(20)


def test_zero_gold_image_excluded_from_mre_only():
    rep = counting_report([("a", [det((0, 0, 1, 1))] * 2), ("b", [det((0, 0, 1, 1))] * 5)],
                          [("a", []), ("b", [(0, BoundingBox(0, 0, 1, 1))] * 10)], 1)
    assert rep.mae[0] == pytest.approx(3.5) and rep.mre[0] == pytest.approx(50)


def test_counts_sum_tiles_into_full_images_like_a_recount():
    rng = np.random.default_rng(2)
    for _ in range(20):
        sources = [f"img{k}" for k in range(4)]
        gold_tiles, pred_tiles = [], []
        recount_g = {s: np.zeros(3, int) for s in sources}
        recount_p = {s: np.zeros(3, int) for s in sources}
        for s in sources:
            for _ in range(rng.integers(1, 5)):
                g = [(int(c), BoundingBox(0, 0, 1, 1)) for c in rng.integers(0, 3, rng.integers(0, 6))]
                p = [det((0, 0, 1, 1), int(c)) for c in rng.integers(0, 3, rng.integers(0, 6))]
                gold_tiles.append((s, g))
                pred_tiles.append((s, p))
                for c, _ in g:
                    recount_g[s][c] += 1
                for d in p:
                    recount_p[s][d.class_id] += 1
        rep = counting_report(pred_tiles, gold_tiles, 3)
        assert rep.images == sources
        assert np.array_equal(rep.gold, np.array([recount_g[s] for s in sources]))
        assert np.array_equal(rep.predicted, np.array([recount_p[s] for s in sources]))


# ---------------------------------------------------------------- Q-ratio

def test_q_ratio_examples():
    assert q_ratio(30, 120) == 25 and classify_celiac(q_ratio(30, 120)) == "celiac"
    assert q_ratio(10, 100) == 10 and classify_celiac(10) == "non-celiac"
    assert q_ratio(0, 50) == 0 and classify_celiac(0) == "non-celiac"
    with pytest.raises(UndefinedRatioError):
        q_ratio(5, 0)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(1, 500))
def test_classification_monotone_in_iel(a, b, en):
    lo, hi = sorted((a, b))
    if classify_celiac(q_ratio(lo, en)) == "celiac":
        assert classify_celiac(q_ratio(hi, en)) == "celiac"


def test_classification_metrics_examples():
    labels = ["celiac", "non-celiac", "celiac"]
    perfect = classification_metrics(labels, labels)
    assert (perfect.precision, perfect.recall, perfect.f1, perfect.accuracy) == (1.0, 1.0, 1.0, 1.0)
    assert classification_metrics(["non-celiac"] * 3, labels).recall == 0.0
    with pytest.raises(ValueError):
        classification_metrics(labels, labels[:2])


def test_twenty_sample_confusion_matrix():
    # hand count: 7 TP, 3 FP, 2 FN, 8 TN
    pred = ["celiac"] * 7 + ["celiac"] * 3 + ["non-celiac"] * 2 + ["non-celiac"] * 8
    gold = ["celiac"] * 7 + ["non-celiac"] * 3 + ["celiac"] * 2 + ["non-celiac"] * 8
    order = np.random.default_rng(3).permutation(20)
    m = classification_metrics([pred[i] for i in order], [gold[i] for i in order])
    assert (m.tp, m.fp, m.fn, m.tn) == (7, 3, 2, 8)
    assert m.precision == pytest.approx(0.7) and m.recall == pytest.approx(7 / 9)
    assert m.f1 == pytest.approx(2 * 0.7 * (7 / 9) / (0.7 + 7 / 9)) and m.accuracy == pytest.approx(0.75)
