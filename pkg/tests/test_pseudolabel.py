import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from espvie.doc_model import EntityCategory, QuadBox, axis_aligned_bbox
from espvie.pseudolabel import (
    KeyLibrary,
    OcrDump,
    PairingRules,
    assign_pseudo_labels,
    box_gap,
    build_key_library,
    count_texts,
    default_threshold,
    library_from_counts,
    load_ocr_dumps,
    load_pseudo_labels,
    pseudolabel_files,
    save_ocr_dumps,
    save_pseudo_labels,
)

B = QuadBox.from_bbox


def dump(*items, **kw):
    return OcrDump(tuple((B(*bb), t) for bb, t in items), **kw)


def _repeat(text, n):
    return [dump(((0, 0, 10, 10), text)) for _ in range(n)]


def test_threshold_is_strict_and_length_gated():
    dumps = (_repeat("Total", 101) + _repeat("Date", 100) + _repeat("ab", 500)
             + _repeat("x" * 51, 500) + _repeat("y" * 50, 500))
    lib = build_key_library(dumps, 100)
    assert set(lib.counts) == {"Total", "y" * 50}
    assert lib.counts["Total"] == 101


def test_whitespace_trimmed_case_kept():
    dumps = _repeat(" Total ", 60) + _repeat("Total", 60) + _repeat("TOTAL", 200)
    lib = build_key_library(dumps, 100)
    assert lib.counts == {"TOTAL": 200, "Total": 120}
    assert "  Total\t" in lib and "total" not in lib


def test_empty_inputs():
    assert len(build_key_library([], 100)) == 0
    with pytest.raises(ValueError):
        build_key_library([], 0)


def test_counts_merge_across_shards():
    dumps = _repeat("Amount", 9) + _repeat("Amount", 8) + _repeat("Ref", 3)
    merged = count_texts(dumps[:9]) + count_texts(dumps[9:])
    assert library_from_counts(merged, 15).counts == build_key_library(dumps, 15).counts == {"Amount": 17}


def test_corpus_defaults():
    assert default_threshold("docbank_like") == 100
    assert default_threshold("rvlcdip_like") == 15
    with pytest.raises(ValueError):
        default_threshold("custom")


LIB = KeyLibrary({"KEY": 500, "KEY2": 500}, 100)


def test_right_candidate_preferred_over_below():
    # key (0,0,40,10); candidates centred at (60,5) and (20,40)
    d = dump(((0, 0, 40, 10), "KEY"), ((50, 0, 70, 10), "v-right"), ((0, 35, 40, 45), "v-below"))
    p = assign_pseudo_labels(d, LIB)
    assert p.link_mask == {(0, 1)}
    cats = [s.category for s in p.doc.segments]
    assert cats == [EntityCategory.QUESTION, EntityCategory.ANSWER, EntityCategory.OTHER]


def test_below_used_when_nothing_to_the_right():
    d = dump(((0, 0, 40, 10), "KEY"), ((0, 35, 40, 45), "v-below"), ((200, 0, 220, 10), "far"))
    assert assign_pseudo_labels(d, LIB).link_mask == {(0, 1)}


def test_radius_and_overlap_gates():
    # right neighbour 31 px away (> 3 x 10), below neighbour overlaps only 20% horizontally
    d = dump(((0, 0, 40, 10), "KEY"), ((71, 0, 90, 10), "far"), ((32, 12, 72, 22), "skewed"))
    p = assign_pseudo_labels(d, LIB)
    assert p.link_mask == frozenset()
    assert p.doc.segments[0].category is EntityCategory.QUESTION
    assert {s.category for s in p.doc.segments[1:]} == {EntityCategory.OTHER}


def test_two_keys_can_share_a_value():
    d = dump(((0, 0, 40, 10), "KEY"), ((0, 14, 40, 24), "KEY2"), ((50, 5, 90, 19), "v"))
    p = assign_pseudo_labels(d, LIB)
    assert p.link_mask == {(0, 2), (1, 2)}


def test_keys_are_never_values():
    d = dump(((0, 0, 40, 10), "KEY"), ((50, 0, 90, 10), "KEY2"))
    p = assign_pseudo_labels(d, LIB)
    assert p.link_mask == frozenset()


def test_no_library_hits():
    d = dump(((0, 0, 40, 10), "a"), ((50, 0, 90, 10), "b"))
    p = assign_pseudo_labels(d, LIB)
    assert all(s.category is EntityCategory.OTHER for s in p.doc.segments)
    assert not p.doc.links and not p.link_mask


def test_box_gap():
    assert box_gap((0, 0, 10, 10), (13, 14, 20, 20)) == 5.0
    assert box_gap((0, 0, 10, 10), (5, 5, 20, 20)) == 0.0


boxes = st.tuples(st.integers(0, 200), st.integers(0, 200), st.integers(4, 60), st.integers(4, 20)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(boxes, st.sampled_from(["KEY", "KEY2", "val", "x1", "zz"])), min_size=1, max_size=8))
def test_pairing_invariants(items):
    d = dump(*items)
    rules = PairingRules()
    p = assign_pseudo_labels(d, LIB, rules)
    assert p == assign_pseudo_labels(d, LIB, rules)
    assert p.link_mask == {lk.pair for lk in p.doc.links}
    for lk in p.doc.links:
        src, dst = p.doc.segment(lk.source), p.doc.segment(lk.target)
        assert src.category is EntityCategory.QUESTION and dst.category is EntityCategory.ANSWER
        k, v = axis_aligned_bbox(src.box), axis_aligned_bbox(dst.box)
        assert box_gap(k, v) <= rules.radius_factor * (k[3] - k[1]) + 1e-9
    assert all(s.category is not EntityCategory.HEADER for s in p.doc.segments)


def test_file_round_trip_and_cli_helper(tmp_path):
    d1 = dump(((0, 0, 40, 10), "KEY"), ((50, 0, 90, 10), "v"), image_path="a.png", width=100, height=50)
    save_ocr_dumps([d1] * 3, tmp_path / "d1.json", "rvlcdip_like")
    save_ocr_dumps([d1], tmp_path / "d2.json", "rvlcdip_like")
    assert load_ocr_dumps(tmp_path / "d2.json")[0].items == d1.items
    lib, docs = pseudolabel_files(str(tmp_path / "d*.json"), "custom", threshold=3)
    assert lib.counts == {"KEY": 4}
    assert [p.link_mask for p in docs] == [{(0, 1)}] * 4
    save_pseudo_labels(docs, tmp_path / "p.json")
    assert load_pseudo_labels(tmp_path / "p.json") == docs
    with pytest.raises(FileNotFoundError):
        pseudolabel_files(str(tmp_path / "nothing*.json"), "custom", 3)
