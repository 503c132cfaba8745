import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from espvie.decoder import aggregate_entities
from espvie.doc_model import CATEGORIES, EntitySegment
from espvie.evalkit import (
    Counts,
    ee_counts,
    evaluate,
    match_boxes,
    normalized_edit_distance,
    polygon_iou,
    score_ee,
    score_el,
)

from conftest import A, H, O, Q, box, make_doc, seg


def graph(segments, inter=(), intra=(), cats=None, texts=None):
    """Prediction graph with one-hot scores and hard links given as (segment index pairs)."""
    n = len(segments)
    lm = np.zeros((n, n, 2))
    for a, b in intra:
        lm[a, b, 0] = 1.0
    for a, b in inter:
        lm[a, b, 1] = 1.0
    cats = cats or [s.category for s in segments]
    scores = np.zeros((n, 4))
    for i, c in enumerate(cats):
        scores[i, c.index] = 1.0
    segments = [EntitySegment(s.id, s.box, s.text, c) for s, c in zip(segments, cats)]
    g = aggregate_entities(segments, lm, category_scores=scores)
    g.texts = texts
    return g


@pytest.fixture
def three():
    segs = [seg(0, 0, 0, 40, 10, Q, "DATE"), seg(1, 50, 0, 90, 10, A, "01/02"), seg(2, 0, 50, 40, 60, O, "THANKS")]
    return make_doc(segs, [(0, 1, "inter")])


@pytest.mark.parametrize("a,b,v", [("abc", "abc", 0.0), ("abc", "abd", 1 / 3), ("", "xy", 1.0), ("", "", 0.0),
                                   ("kitten", "sitting", 3 / 7)])
def test_ned_examples(a, b, v):
    assert normalized_edit_distance(a, b) == pytest.approx(v, abs=1e-15)
    assert normalized_edit_distance(b, a) == normalized_edit_distance(a, b)


@settings(max_examples=50, deadline=None)
@given(st.text(max_size=6), st.text(max_size=6))
def test_ned_bounds(a, b):
    v = normalized_edit_distance(a, b)
    assert 0 <= v <= 1 and (v == 0) == (a == b)


def test_counts_and_zero_f1():
    assert Counts().prf() == (0.0, 0.0, 0.0)
    assert Counts(2, 1, 1).prf() == pytest.approx((2 / 3, 2 / 3, 2 / 3))


def test_identical_and_disjoint_boxes():
    boxes = [box(0, 0, 10, 10), box(20, 0, 30, 10)]
    assert match_boxes(boxes, boxes) == {0: 0, 1: 1}
    assert match_boxes(boxes, [box(100, 100, 110, 110)]) == {}
    assert polygon_iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3)


def _brute_force(iou, thr):
    n, m = iou.shape
    best, best_pairs = -1.0, None
    for perm in itertools.permutations(range(m), min(n, m)) if n <= m else []:
        pairs = [(i, j) for i, j in enumerate(perm) if iou[i, j] >= thr]
        total = sum(iou[i, j] for i, j in pairs)
        if total > best:
            best, best_pairs = total, pairs
    return dict(best_pairs)


def _separated(iou):
    top2 = np.sort(iou, axis=1)[:, -2:]
    return bool((top2[:, 1] - top2[:, 0] > 0.1).all())


def test_greedy_matches_exhaustive_when_separated():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 20:
        gt = [box(x, y, x + w, y + h) for x, y, w, h in rng.uniform([0, 0, 8, 8], [60, 60, 20, 20], (8, 4))]
        pred = [box(*(np.array(b.vertices[0] + b.vertices[2]) + rng.normal(0, 2, 4))) for b in gt]
        iou = np.array([[polygon_iou(p, g) for g in gt] for p in pred])
        if not (_separated(iou) and _separated(iou.T)):
            continue
        assert match_boxes(pred, gt) == _brute_force(iou, 0.5)
        checked += 1


def test_perfect_prediction(kv_doc):
    g = graph(list(kv_doc.segments), inter=[(1, 2), (4, 5)], intra=[(2, 3)])
    assert score_ee(g, kv_doc) == (1.0, 1.0, 1.0)
    assert score_el(g, kv_doc) == (1.0, 1.0, 1.0)
    r = evaluate([g], [kv_doc])
    assert r.ee_f1 == r.el_f1 == r.det_f1 == 1.0
    assert r.per_category["answer"].tp == 2


def test_one_wrong_label(three):
    g = graph(list(three.segments), inter=[(0, 1)], cats=[Q, Q, O])
    p, r, f = score_ee(g, three)
    assert (p, r, f) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-15)


def test_flipped_question_answer(three):
    g = graph(list(three.segments), cats=[A, Q, O])
    _, per = ee_counts(g, three)
    assert per["question"].f1 == 0 and per["answer"].f1 == 0 and per["other"].f1 == 1


def test_links_two_of_three_plus_spurious():
    segs = [seg(i, 0, 12 * i, 30, 12 * i + 10, Q if i % 2 == 0 else A) for i in range(6)]
    gt = make_doc(segs, [(0, 1, "inter"), (2, 3, "inter"), (4, 5, "inter")])
    g = graph(segs, inter=[(0, 1), (2, 3), (4, 3)])
    assert score_el(g, gt) == pytest.approx((2 / 3, 2 / 3, 2 / 3), abs=1e-15)


def test_reversed_links_score_zero(kv_doc):
    g = graph(list(kv_doc.segments), inter=[(2, 1), (5, 4)], intra=[(2, 3)])
    assert score_el(g, kv_doc) == (0.0, 0.0, 0.0)


def test_entity_split_is_wrong(kv_doc):
    g = graph(list(kv_doc.segments), inter=[(1, 2), (4, 5)])  # JOHN / SMITH not merged
    p, r, _ = score_ee(g, kv_doc)
    assert (p, r) == (5 / 7, 5 / 6)


def test_relabelling_symmetry(kv_doc):
    g = graph(list(kv_doc.segments), inter=[(1, 2)], intra=[(2, 3)], cats=[H, Q, A, A, A, A, O])
    remap = {i: 100 - i for i in kv_doc.ids}
    segs2 = [EntitySegment(remap[s.id], s.box, s.text, s.category) for s in kv_doc.segments]
    gt2 = make_doc(segs2, [(remap[lk.source], remap[lk.target], lk.kind.value) for lk in kv_doc.links])
    g2 = graph(segs2, inter=[(1, 2)], intra=[(2, 3)], cats=[H, Q, A, A, A, A, O])
    assert score_ee(g, kv_doc) == score_ee(g2, gt2)
    assert score_el(g, kv_doc) == score_el(g2, gt2)


def test_pred_boxes_mode_and_iou_gate(three):
    shifted = [EntitySegment(10 + s.id, box(*np.add(s.box.vertices[0] + s.box.vertices[2], (2, 0, 2, 0))), s.text, s.category) for s in three.segments]
    g = graph(shifted, inter=[(0, 1)])
    assert score_ee(g, three, "pred_boxes") == (1.0, 1.0, 1.0)
    assert score_el(g, three, "pred_boxes")[2] == 1.0
    with pytest.raises(ValueError, match="gt_input"):
        score_ee(g, three, "gt_input")
    assert score_ee(g, three, "pred_boxes", iou_threshold=0.95)[2] == 0.0


def test_ned_gate_on_end_to_end(three):
    segs = list(three.segments)
    ok = graph(segs, inter=[(0, 1)], texts={0: "DATF", 1: "01/02", 2: "THANKS"})  # NED 0.25
    bad = graph(segs, inter=[(0, 1)], texts={0: "DXTF", 1: "01/02", 2: "THANKS"})  # NED 0.5
    assert score_ee(ok, three, "pred_boxes_and_text")[2] == 1.0
    assert score_ee(bad, three, "pred_boxes_and_text")[1] == pytest.approx(2 / 3)
    assert score_el(bad, three, "pred_boxes_and_text")[2] == 0.0
    blank = graph([EntitySegment(s.id, s.box, "", s.category) for s in segs])
    with pytest.raises(ValueError, match="recognised texts"):
        score_ee(blank, three, "pred_boxes_and_text")


def test_evaluate_is_micro_averaged(three, kv_doc):
    good = graph(list(kv_doc.segments), inter=[(1, 2), (4, 5)], intra=[(2, 3)])
    half = graph(list(three.segments), inter=[(0, 1)], cats=[Q, Q, O])
    r = evaluate([good, half], [kv_doc, three])
    assert (r.ee.tp, r.ee.fp, r.ee.fn) == (8, 1, 1)
    assert r.documents == 2 and "EE" in r.table() and r.to_dict()["mode"] == "gt_input"
    with pytest.raises(ValueError):
        evaluate([good], [kv_doc, three])


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.sampled_from(CATEGORIES), min_size=7, max_size=7),
       st.sets(st.tuples(st.integers(0, 6), st.integers(0, 6)).filter(lambda t: t[0] != t[1]), max_size=6))
def test_scores_in_unit_interval(kv_doc, cats, links):
    g = graph(list(kv_doc.segments), inter=sorted(links), cats=cats)
    for p, r, f in (score_ee(g, kv_doc), score_el(g, kv_doc)):
        assert 0 <= min(p, r, f) and max(p, r, f) <= 1
        assert f <= max(p, r) + 1e-12
