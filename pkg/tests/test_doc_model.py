import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from espvie.doc_model import (
    AnnotationError,
    DocumentAnnotation,
    EntityCategory,
    EntitySegment,
    Link,
    LinkKind,
    QuadBox,
    UnionFind,
    axis_aligned_bbox,
    dumps_annotations,
    entity_groups,
    load_annotations,
    save_annotations,
)

from conftest import make_doc, seg


def test_quad_order_is_normalised_clockwise_from_top_left():
    q = QuadBox(((0, 4), (10, 4), (10, 0), (0, 0)))  # counter-clockwise on screen
    assert q.vertices == ((0, 0), (10, 0), (10, 4), (0, 4))
    q2 = QuadBox(((10, 4), (0, 4), (0, 0), (10, 0)))
    assert q2 == q


@pytest.mark.parametrize("verts", [
    ((0, 0), (1, 0), (2, 0), (3, 0)),  # zero area
    ((0, 0), (10, 10), (10, 0), (0, 10)),  # bow tie
    ((0, 0), (1, 0), (1, 1)),
    ((0, 0), (1, 0), (1, math.nan), (0, 1)),
])
def test_invalid_quads_rejected(verts):
    with pytest.raises(ValueError):
        QuadBox(verts)


def test_axis_aligned_bbox_examples():
    assert axis_aligned_bbox(QuadBox(((0, 0), (10, 0), (10, 4), (0, 4)))) == (0, 0, 10, 4)
    assert axis_aligned_bbox(QuadBox(((5, 0), (10, 5), (5, 10), (0, 5)))) == (0, 0, 10, 10)


@given(st.permutations(range(4)))
def test_bbox_invariant_to_vertex_rotation(perm):
    base = ((1.0, 2.0), (9.0, 3.0), (8.0, 7.5), (0.5, 6.0))
    shift = perm[0]
    q = QuadBox(base[shift:] + base[:shift])
    assert axis_aligned_bbox(q) == (0.5, 2.0, 9.0, 7.5)
    assert q == QuadBox(base)


def test_link_rules():
    with pytest.raises(ValueError):
        Link(3, 3)
    assert Link(1, 2) != Link(2, 1)
    with pytest.raises(ValueError, match="missing segment 99"):
        make_doc([seg(0, 0, 0, 5, 5)], [(0, 99, "inter")])


def test_vertices_outside_image_beyond_tolerance():
    make_doc([seg(0, -1.5, 0, 10, 10)], width=20, height=20)
    with pytest.raises(ValueError, match="outside"):
        make_doc([seg(0, -3, 0, 10, 10)], width=20, height=20)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        make_doc([seg(4, 0, 0, 5, 5), seg(4, 6, 6, 9, 9)])


def test_two_segment_fixture_loads(tmp_path):
    doc = make_doc([seg(0, 0, 0, 10, 10, EntityCategory.ANSWER, "a"),
                    seg(7, 0, 12, 10, 20, EntityCategory.ANSWER, "b")], [(0, 7, "intra")])
    path = tmp_path / "a.json"
    save_annotations([doc], path)
    (loaded,) = load_annotations(path)
    assert len(loaded.segments) == 2 and len(loaded.links) == 1
    assert loaded.links[0].kind is LinkKind.INTRA


def test_empty_document_valid_and_links_serialised(tmp_path):
    doc = make_doc([])
    path = tmp_path / "e.json"
    save_annotations([doc], path)
    raw = json.loads(path.read_text(encoding="utf-8"))
    assert raw["documents"][0]["links"] == [] and raw["documents"][0]["segments"] == []
    assert load_annotations(path) == [doc]


def test_cjk_text_preserved(tmp_path):
    doc = make_doc([seg(0, 0, 0, 10, 10, EntityCategory.QUESTION, "发票号码：№ 12")])
    path = tmp_path / "c.json"
    save_annotations([doc], path)
    assert not path.read_bytes().startswith(b"\xef\xbb\xbf")
    assert load_annotations(path)[0].segments[0].text == "发票号码：№ 12"


def test_loader_diagnostics_name_document_and_field(tmp_path):
    path = tmp_path / "bad.json"
    good = json.loads(dumps_annotations([make_doc([seg(0, 0, 0, 5, 5)])]))["documents"][0]
    bad = json.loads(json.dumps(good))
    bad["links"] = [{"source": 0, "target": 99, "kind": "inter"}]
    path.write_text(json.dumps({"documents": [good, bad]}), encoding="utf-8")
    with pytest.raises(AnnotationError, match=r"documents\[1\].*links\[0\]"):
        load_annotations(path)
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(AnnotationError, match="malformed"):
        load_annotations(path)
    bad = json.loads(json.dumps(good))
    bad["segments"][0]["category"] = "price"
    path.write_text(json.dumps({"documents": [bad]}), encoding="utf-8")
    with pytest.raises(AnnotationError, match=r"segments\[0\]"):
        load_annotations(path)


coord = st.floats(0, 100, allow_nan=False)


@st.composite
def documents(draw):
    n = draw(st.integers(0, 6))
    ids = draw(st.lists(st.integers(0, 1000), min_size=n, max_size=n, unique=True))
    segs = []
    for i in ids:
        x0, y0 = draw(coord), draw(coord)
        w, h = draw(st.floats(1, 50)), draw(st.floats(1, 50))
        text = draw(st.text(max_size=8))
        cat = draw(st.sampled_from(list(EntityCategory)))
        segs.append(EntitySegment(i, QuadBox.from_bbox(x0, y0, x0 + w, y0 + h), text, cat))
    links = []
    if n >= 2:
        for _ in range(draw(st.integers(0, 4))):
            a, b = draw(st.sampled_from(ids)), draw(st.sampled_from(ids))
            if a != b:
                links.append(Link(a, b, draw(st.sampled_from(list(LinkKind)))))
    return DocumentAnnotation("p.png", 160, 160, tuple(segs), tuple(links))


@settings(max_examples=40, deadline=None)
@given(st.lists(documents(), max_size=3))
def test_save_load_round_trip(tmp_path_factory, docs):
    path = tmp_path_factory.mktemp("rt") / "docs.json"
    save_annotations(docs, path)
    first = path.read_bytes()
    loaded = load_annotations(path)
    assert loaded == docs
    save_annotations(loaded, path)
    assert path.read_bytes() == first


@settings(max_examples=30, deadline=None)
@given(documents(), st.data())
def test_deleting_referenced_segment_is_rejected(tmp_path_factory, doc, data):
    if not doc.links:
        return
    victim = data.draw(st.sampled_from([lk.source for lk in doc.links] + [lk.target for lk in doc.links]))
    raw = json.loads(dumps_annotations([doc]))
    raw["documents"][0]["segments"] = [s for s in raw["documents"][0]["segments"] if s["id"] != victim]
    path = tmp_path_factory.mktemp("del") / "d.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    with pytest.raises(AnnotationError):
        load_annotations(path)


def test_union_find_groups():
    assert entity_groups([5, 1, 3, 2], [(3, 1), (2, 5)]) == [[1, 3], [2, 5]]
    uf = UnionFind()
    uf.union("b", "a")
    assert uf.find("b") == "a"
