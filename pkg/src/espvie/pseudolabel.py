"""Pre-training pseudo-labels from OCR dumps: a frequency key library plus spatial key-value pairing."""

from __future__ import annotations

import enum
import glob
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .doc_model import (
    AnnotationError,
    DocumentAnnotation,
    EntityCategory,
    EntitySegment,
    Link,
    LinkKind,
    QuadBox,
    axis_aligned_bbox,
    document_from_dict,
    document_to_dict,
    parse_box,
    _require,
)

MIN_KEY_LEN = 3
MAX_KEY_LEN = 50


class CorpusTag(str, enum.Enum):
    DOCBANK_LIKE = "docbank_like"
    RVLCDIP_LIKE = "rvlcdip_like"
    CUSTOM = "custom"


DEFAULT_THRESHOLDS = {CorpusTag.DOCBANK_LIKE: 100, CorpusTag.RVLCDIP_LIKE: 15}


def default_threshold(tag: CorpusTag | str) -> int:
    tag = CorpusTag(tag)
    if tag not in DEFAULT_THRESHOLDS:
        raise ValueError(f"corpus tag {tag.value!r} has no default threshold; pass one explicitly")
    return DEFAULT_THRESHOLDS[tag]


@dataclass(frozen=True)
class OcrDump:
    """OCR output of one document."""

    items: tuple[tuple[QuadBox, str], ...]
    corpus_tag: CorpusTag = CorpusTag.CUSTOM
    image_path: str = ""
    width: int = 0
    height: int = 0

    def __post_init__(self):
        object.__setattr__(self, "items", tuple((b, "" if t is None else str(t)) for b, t in self.items))
        object.__setattr__(self, "corpus_tag", CorpusTag(self.corpus_tag))


def normalize_text(text: str) -> str:
    return text.strip()


@dataclass
class KeyLibrary:
    counts: dict[str, int] = field(default_factory=dict)
    threshold: int = 1

    def __contains__(self, text: str) -> bool:
        return normalize_text(text) in self.counts

    def __len__(self):
        return len(self.counts)


def count_texts(dumps: Iterable[OcrDump]) -> Counter:
    """Occurrence counts of normalised texts; counts from shards can be summed."""
    c: Counter = Counter()
    for d in dumps:
        c.update(normalize_text(t) for _, t in d.items)
    return c


def library_from_counts(counts: Counter, threshold: int) -> KeyLibrary:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    kept = {t: n for t, n in sorted(counts.items())
            if n > threshold and MIN_KEY_LEN <= len(t) <= MAX_KEY_LEN}
    return KeyLibrary(kept, threshold)


def build_key_library(dumps: Iterable[OcrDump], threshold: int) -> KeyLibrary:
    """Texts seen more than ``threshold`` times with 3..50 characters."""
    return library_from_counts(count_texts(dumps), threshold)


@dataclass(frozen=True)
class PairingRules:
    min_overlap: float = 0.3
    radius_factor: float = 3.0


@dataclass(frozen=True)
class PseudoLabeledDoc:
    doc: DocumentAnnotation
    link_mask: frozenset[tuple[int, int]]


def _overlap(a0, a1, b0, b1) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def box_gap(a, b) -> float:
    """Euclidean distance between two axis-aligned boxes (0 when they touch or overlap)."""
    dx = max(0.0, b[0] - a[2], a[0] - b[2])
    dy = max(0.0, b[1] - a[3], a[1] - b[3])
    return math.hypot(dx, dy)


def _center(b):
    return (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))


def find_value(key_idx: int, bboxes: Sequence, candidates: Sequence[int],
               rules: PairingRules = PairingRules()) -> int | None:
    """Nearest candidate to the right of the key, else nearest below, within the search radius."""
    k = bboxes[key_idx]
    kc = _center(k)
    radius = rules.radius_factor * (k[3] - k[1])

    def rank(j):
        b = bboxes[j]
        c = _center(b)
        return (box_gap(k, b), math.hypot(c[0] - kc[0], c[1] - kc[1]), j)

    right, below = [], []
    for j in candidates:
        b = bboxes[j]
        if box_gap(k, b) > radius:
            continue
        c = _center(b)
        if c[0] > kc[0] and _overlap(k[1], k[3], b[1], b[3]) >= rules.min_overlap * min(k[3] - k[1], b[3] - b[1]):
            right.append(j)
        if c[1] > kc[1] and _overlap(k[0], k[2], b[0], b[2]) >= rules.min_overlap * min(k[2] - k[0], b[2] - b[0]):
            below.append(j)
    for group in (right, below):
        if group:
            return min(group, key=rank)
    return None


def assign_pseudo_labels(dump: OcrDump, lib: KeyLibrary, rules: PairingRules = PairingRules()) -> PseudoLabeledDoc:
    """Library hits become questions, their paired segments answers, the rest ``other``.

    Segment ids follow the dump's item order.
    """
    bboxes = [axis_aligned_bbox(b) for b, _ in dump.items]
    keys = [i for i, (_, t) in enumerate(dump.items) if t in lib]
    key_set = set(keys)
    non_keys = [i for i in range(len(dump.items)) if i not in key_set]
    pairs = []
    for k in keys:
        v = find_value(k, bboxes, non_keys, rules)
        if v is not None:
            pairs.append((k, v))
    values = {v for _, v in pairs}
    segs = []
    for i, (box, text) in enumerate(dump.items):
        if i in key_set:
            cat = EntityCategory.QUESTION
        elif i in values:
            cat = EntityCategory.ANSWER
        else:
            cat = EntityCategory.OTHER
        segs.append(EntitySegment(i, box, text, cat))
    w = dump.width or max(1, math.ceil(max((b[2] for b in bboxes), default=1)))
    h = dump.height or max(1, math.ceil(max((b[3] for b in bboxes), default=1)))
    doc = DocumentAnnotation(dump.image_path, w, h, tuple(segs),
                             tuple(Link(a, b, LinkKind.INTER) for a, b in pairs))
    return PseudoLabeledDoc(doc, frozenset(pairs))


# ----------------------------------------------------------------------- I/O


def load_ocr_dumps(path: str | os.PathLike) -> list[OcrDump]:
    """``{"corpus_tag": ..., "documents": [{"image_path", "width", "height", "segments": [{"id", "box", "text"}]}]}``"""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from None
    tag = raw.get("corpus_tag", "custom") if isinstance(raw, dict) else "custom"
    try:
        tag = CorpusTag(tag)
    except ValueError:
        raise AnnotationError(f"{path}: unknown corpus_tag {tag!r}") from None
    out = []
    for i, d in enumerate(_require(raw, "documents", list, "$")):
        where = f"documents[{i}]"
        items = []
        for k, s in enumerate(_require(d, "segments", list, where)):
            sw = f"{where}.segments[{k}]"
            box = parse_box(s.get("box") if isinstance(s, dict) else None, f"{sw}.box")
            text = _require(s, "text", str, sw)
            items.append((box, text))
        out.append(OcrDump(tuple(items), tag, d.get("image_path", ""), int(d.get("width", 0)),
                           int(d.get("height", 0))))
    return out


def save_ocr_dumps(dumps: Sequence[OcrDump], path: str | os.PathLike,
                   corpus_tag: CorpusTag | str = CorpusTag.CUSTOM) -> None:
    payload = {"corpus_tag": CorpusTag(corpus_tag).value, "documents": [
        {"image_path": d.image_path, "width": d.width, "height": d.height,
         "segments": [{"id": i, "box": b.to_list(), "text": t} for i, (b, t) in enumerate(d.items)]}
        for d in dumps]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def dump_from_annotation(doc: DocumentAnnotation, tag: CorpusTag | str = CorpusTag.CUSTOM) -> OcrDump:
    return OcrDump(tuple((s.box, s.text) for s in doc.segments), CorpusTag(tag), doc.image_path,
                   doc.width, doc.height)


def save_pseudo_labels(docs: Sequence[PseudoLabeledDoc], path: str | os.PathLike) -> None:
    payload = []
    for p in docs:
        d = document_to_dict(p.doc)
        d["link_mask"] = [list(pair) for pair in sorted(p.link_mask)]
        payload.append(d)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"documents": payload}, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_pseudo_labels(path: str | os.PathLike) -> list[PseudoLabeledDoc]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = []
    for i, d in enumerate(_require(raw, "documents", list, "$")):
        doc = document_from_dict(d, f"documents[{i}]")
        mask = frozenset(tuple(p) for p in d.get("link_mask", [lk.pair for lk in doc.links]))
        out.append(PseudoLabeledDoc(doc, mask))
    return out


def pseudolabel_files(pattern: str, corpus_tag: CorpusTag | str, threshold: int | None = None,
                      rules: PairingRules = PairingRules()) -> tuple[KeyLibrary, list[PseudoLabeledDoc]]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no OCR dumps match {pattern!r}")
    dumps = [d for p in paths for d in load_ocr_dumps(p)]
    thr = threshold if threshold is not None else default_threshold(corpus_tag)
    lib = build_key_library(dumps, thr)
    return lib, [assign_pseudo_labels(d, lib, rules) for d in dumps]
