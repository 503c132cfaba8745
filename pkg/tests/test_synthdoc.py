import numpy as np
import pytest
from PIL import Image

from espvie.doc_model import EntityCategory, LinkKind, axis_aligned_bbox, load_annotations
from espvie.font5x7 import CHARSET, render_text
from espvie.synthdoc import SynthConfig, generate_corpus, generate_document


def _is_axis_aligned(box):
    xs = sorted({round(x, 6) for x, _ in box.vertices})
    ys = sorted({round(y, 6) for _, y in box.vertices})
    return len(xs) == 2 and len(ys) == 2


def test_same_config_gives_byte_identical_files(tmp_path):
    cfg = SynthConfig(seed=7, num_docs=3)
    generate_corpus(cfg, tmp_path / "a")
    generate_corpus(cfg, tmp_path / "b")
    for rel in ["annotations.json", "images/doc_00000.png", "images/doc_00002.png"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_parallel_matches_serial(tmp_path):
    cfg = SynthConfig(seed=3, num_docs=3)
    serial = generate_corpus(cfg, tmp_path / "s")
    parallel = generate_corpus(cfg, tmp_path / "p", workers=2)
    assert serial == parallel


def test_documents_validate_and_count_rules():
    cfg = SynthConfig(seed=1, num_docs=15, multiline_value_prob=0.5)
    for i in range(cfg.num_docs):
        doc, image = generate_document(cfg, i)
        assert image.shape == (512, 512, 3) and image.dtype == np.uint8
        cats = [s.category for s in doc.segments]
        assert cats[0] is EntityCategory.HEADER and cats[-1] is EntityCategory.OTHER
        inter = doc.links_of_kind(LinkKind.INTER)
        intra = doc.links_of_kind(LinkKind.INTRA)
        n_keys = cats.count(EntityCategory.QUESTION)
        n_value_segments = cats.count(EntityCategory.ANSWER)
        assert len(inter) == n_keys
        assert len(intra) == n_value_segments - n_keys
        for lk in inter:
            assert doc.segment(lk.source).category is EntityCategory.QUESTION
            assert doc.segment(lk.target).category is EntityCategory.ANSWER
        for lk in intra:
            assert lk.source < lk.target  # reading order
        assert all(_is_axis_aligned(s.box) for s in doc.segments)


def test_zero_multiline_probability_gives_no_intra_links():
    cfg = SynthConfig(seed=2, num_docs=10, multiline_value_prob=0.0)
    for i in range(cfg.num_docs):
        doc, _ = generate_document(cfg, i)
        assert not doc.links_of_kind(LinkKind.INTRA)


def test_forced_single_pair_two_line_value():
    cfg = SynthConfig(seed=5, num_docs=6, max_pairs_per_doc=1, multiline_value_prob=1.0)
    for i in range(cfg.num_docs):
        doc, _ = generate_document(cfg, i)
        assert len(doc.links_of_kind(LinkKind.INTER)) == 1
        assert len(doc.links_of_kind(LinkKind.INTRA)) == 1


def test_rotation_and_overlap_still_valid():
    cfg = SynthConfig(seed=9, num_docs=8, rotation_jitter_deg=6.0, overlap_prob=1.0)
    rotated = overlapped = 0
    for i in range(cfg.num_docs):
        doc, _ = generate_document(cfg, i)
        rotated += sum(not _is_axis_aligned(s.box) for s in doc.segments)
        for lk in doc.links_of_kind(LinkKind.INTER):
            k = axis_aligned_bbox(doc.segment(lk.source).box)
            v = axis_aligned_bbox(doc.segment(lk.target).box)
            overlapped += v[0] < k[2]
    assert rotated > 0 and overlapped > 0


def test_quads_cover_ink():
    cfg = SynthConfig(seed=0, num_docs=1, noise_std=0.0, blur_prob=0.0)
    doc, image = generate_document(cfg, 0)
    gray = image.mean(axis=2)
    mask = np.zeros_like(gray, dtype=bool)
    for s in doc.segments:
        x0, y0, x1, y1 = (int(round(v)) for v in axis_aligned_bbox(s.box))
        mask[max(y0 - 1, 0):y1 + 1, max(x0 - 1, 0):x1 + 1] = True
    background = np.median(gray[~mask])
    assert (gray[~mask] > background - 40).all()  # no ink outside any quad
    for s in doc.segments:
        x0, y0, x1, y1 = (int(round(v)) for v in axis_aligned_bbox(s.box))
        assert gray[y0:y1, x0:x1].min() < background - 80


def test_corpus_layout_on_disk(tmp_path):
    cfg = SynthConfig(seed=4, num_docs=2, image_size=(320, 256))
    docs = generate_corpus(cfg, tmp_path)
    loaded = load_annotations(tmp_path / "annotations.json")
    assert loaded == docs
    img = Image.open(tmp_path / loaded[1].image_path)
    assert img.format == "PNG" and img.size == (320, 256)


@pytest.mark.parametrize("kw", [dict(overlap_prob=1.5), dict(num_docs=0), dict(rotation_jitter_deg=-1),
                                dict(max_pairs_per_doc=30)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_font_renders_every_glyph():
    for ch in CHARSET:
        m = render_text(ch, 1)
        assert m.shape == (7, 5)
        assert ch == " " or m.any()
    assert render_text("AB", 2).shape == (14, 22)
