"""Documents, text segments, links and the annotation JSON format."""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

# Vertices may overshoot the image border by this much before a document is rejected.
CLAMP_TOLERANCE = 2.0
MIN_AREA = 1e-6


class AnnotationError(ValueError):
    """Raised when an annotation file cannot be parsed or fails validation."""


class EntityCategory(str, enum.Enum):
    QUESTION = "question"
    ANSWER = "answer"
    HEADER = "header"
    OTHER = "other"

    @property
    def index(self) -> int:
        return CATEGORIES.index(self)


CATEGORIES: tuple[EntityCategory, ...] = tuple(EntityCategory)


class LinkKind(str, enum.Enum):
    INTRA = "intra"
    INTER = "inter"

    @property
    def index(self) -> int:
        return LINK_KINDS.index(self)


LINK_KINDS: tuple[LinkKind, ...] = tuple(LinkKind)


def _signed_area(pts: Sequence[tuple[float, float]]) -> float:
    # positive for clockwise order in image coordinates (y pointing down)
    s = 0.0
    for i in range(len(pts)):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % len(pts)]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_cross(p1, p2, p3, p4) -> bool:
    d1 = _cross(p3, p4, p1)
    d2 = _cross(p3, p4, p2)
    d3 = _cross(p1, p2, p3)
    d4 = _cross(p1, p2, p4)
    if ((d1 > 0 > d2) or (d1 < 0 < d2)) and ((d3 > 0 > d4) or (d3 < 0 < d4)):
        return True
    return False


def _is_simple_quad(pts: Sequence[tuple[float, float]]) -> bool:
    # only opposite edges of a quadrilateral can cross each other
    a, b, c, d = pts
    return not (_segments_cross(a, b, c, d) or _segments_cross(b, c, d, a))


@dataclass(frozen=True)
class QuadBox:
    """Four vertices ordered clockwise starting at the top-left vertex.

    The top-left vertex is the one minimising ``x + y`` (ties: smaller ``y``).
    Construction normalises the order; a self-intersecting or zero-area
    polygon raises ``ValueError``.
    """

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = [tuple(float(c) for c in p) for p in self.vertices]
        if len(pts) != 4 or any(len(p) != 2 for p in pts):
            raise ValueError(f"a quad needs exactly 4 (x, y) vertices, got {self.vertices!r}")
        if not all(math.isfinite(c) for p in pts for c in p):
            raise ValueError(f"non-finite vertex coordinate in {pts!r}")
        if not _is_simple_quad(pts):
            raise ValueError(f"self-intersecting quad {pts!r}")
        area = _signed_area(pts)
        if abs(area) <= MIN_AREA:
            raise ValueError(f"degenerate quad (area {area:g}) {pts!r}")
        if area < 0:
            pts = pts[::-1]
        start = min(range(4), key=lambda i: (pts[i][0] + pts[i][1], pts[i][1]))
        pts = pts[start:] + pts[:start]
        object.__setattr__(self, "vertices", tuple(pts))

    @classmethod
    def from_bbox(cls, xmin: float, ymin: float, xmax: float, ymax: float) -> "QuadBox":
        return cls(((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)))

    @property
    def area(self) -> float:
        return abs(_signed_area(self.vertices))

    @property
    def center(self) -> tuple[float, float]:
        """Center of the axis-aligned hull."""
        xmin, ymin, xmax, ymax = axis_aligned_bbox(self)
        return (0.5 * (xmin + xmax), 0.5 * (ymin + ymax))

    def scaled(self, sx: float, sy: float | None = None) -> "QuadBox":
        sy = sx if sy is None else sy
        return QuadBox(tuple((x * sx, y * sy) for x, y in self.vertices))

    def to_list(self) -> list[list[float]]:
        return [[x, y] for x, y in self.vertices]


def axis_aligned_bbox(box: QuadBox) -> tuple[float, float, float, float]:
    xs = [p[0] for p in box.vertices]
    ys = [p[1] for p in box.vertices]
    return (min(xs), min(ys), max(xs), max(ys))


@dataclass(frozen=True)
class EntitySegment:
    id: int
    box: QuadBox
    text: str = ""
    category: EntityCategory = EntityCategory.OTHER

    def __post_init__(self):
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 0:
            raise ValueError(f"segment id must be a non-negative integer, got {self.id!r}")
        object.__setattr__(self, "category", EntityCategory(self.category))


@dataclass(frozen=True)
class Link:
    source: int
    target: int
    kind: LinkKind = LinkKind.INTER

    def __post_init__(self):
        if self.source == self.target:
            raise ValueError(f"self-link on segment {self.source}")
        object.__setattr__(self, "kind", LinkKind(self.kind))

    @property
    def pair(self) -> tuple[int, int]:
        return (self.source, self.target)


@dataclass(frozen=True)
class DocumentAnnotation:
    image_path: str
    width: int
    height: int
    segments: tuple[EntitySegment, ...] = ()
    links: tuple[Link, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "links", tuple(self.links))
        problems = _document_problems(self)
        if problems:
            path, msg = problems[0]
            raise ValueError(f"{path}: {msg}")

    def segment(self, seg_id: int) -> EntitySegment:
        for s in self.segments:
            if s.id == seg_id:
                return s
        raise KeyError(seg_id)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.segments]

    def links_of_kind(self, kind: LinkKind | str) -> list[Link]:
        kind = LinkKind(kind)
        return [lk for lk in self.links if lk.kind is kind]


def _document_problems(doc: DocumentAnnotation) -> list[tuple[str, str]]:
    out = []
    for name in ("width", "height"):
        v = getattr(doc, name)
        if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
            out.append((name, f"must be a positive integer, got {v!r}"))
    if out:
        return out
    seen: set[int] = set()
    for k, seg in enumerate(doc.segments):
        if seg.id in seen:
            out.append((f"segments[{k}].id", f"duplicate id {seg.id}"))
        seen.add(seg.id)
        for x, y in seg.box.vertices:
            if not (-CLAMP_TOLERANCE <= x <= doc.width + CLAMP_TOLERANCE
                    and -CLAMP_TOLERANCE <= y <= doc.height + CLAMP_TOLERANCE):
                out.append((f"segments[{k}].box", f"vertex ({x:g}, {y:g}) outside "
                            f"{doc.width}x{doc.height} image"))
                break
    for k, lk in enumerate(doc.links):
        for end in ("source", "target"):
            if getattr(lk, end) not in seen:
                out.append((f"links[{k}].{end}",
                            f"link {lk.source}->{lk.target} references missing segment "
                            f"{getattr(lk, end)}"))
    return out


# --------------------------------------------------------------------------- JSON


def segment_to_dict(seg: EntitySegment) -> dict:
    return {"id": seg.id, "box": seg.box.to_list(), "text": seg.text,
            "category": seg.category.value}


def document_to_dict(doc: DocumentAnnotation) -> dict:
    return {
        "image_path": doc.image_path,
        "width": doc.width,
        "height": doc.height,
        "segments": [segment_to_dict(s) for s in doc.segments],
        "links": [{"source": lk.source, "target": lk.target, "kind": lk.kind.value}
                  for lk in doc.links],
    }


def _require(obj: dict, key: str, types, where: str):
    if not isinstance(obj, dict):
        raise AnnotationError(f"{where}: expected an object")
    if key not in obj:
        raise AnnotationError(f"{where}.{key}: missing field")
    val = obj[key]
    if not isinstance(val, types) or (isinstance(val, bool) and bool not in _as_tuple(types)):
        raise AnnotationError(f"{where}.{key}: expected {types}, got {type(val).__name__}")
    return val


def _as_tuple(t):
    return t if isinstance(t, tuple) else (t,)


def parse_box(raw, where: str) -> QuadBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise AnnotationError(f"{where}: expected a list of 4 [x, y] points")
    pts = []
    for k, p in enumerate(raw):
        if (not isinstance(p, list) or len(p) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in p)):
            raise AnnotationError(f"{where}[{k}]: expected [x, y] numbers")
        pts.append((float(p[0]), float(p[1])))
    try:
        return QuadBox(tuple(pts))
    except ValueError as exc:
        raise AnnotationError(f"{where}: {exc}") from None


def document_from_dict(raw: dict, where: str = "documents[0]",
                       require_labels: bool = True) -> DocumentAnnotation:
    image_path = _require(raw, "image_path", str, where)
    width = _require(raw, "width", int, where)
    height = _require(raw, "height", int, where)
    segs = []
    for k, rs in enumerate(_require(raw, "segments", list, where)):
        sw = f"{where}.segments[{k}]"
        sid = _require(rs, "id", int, sw)
        box = parse_box(rs.get("box"), f"{sw}.box")
        text = _require(rs, "text", str, sw)
        if require_labels:
            cat = _require(rs, "category", str, sw)
            try:
                category = EntityCategory(cat)
            except ValueError:
                raise AnnotationError(f"{sw}.category: unknown category {cat!r}") from None
        else:
            category = EntityCategory(rs.get("category", "other"))
        if sid < 0:
            raise AnnotationError(f"{sw}.id: must be non-negative")
        segs.append(EntitySegment(sid, box, text, category))
    links = []
    raw_links = _require(raw, "links", list, where) if require_labels else raw.get("links", [])
    for k, rl in enumerate(raw_links):
        lw = f"{where}.links[{k}]"
        src = _require(rl, "source", int, lw)
        dst = _require(rl, "target", int, lw)
        kind = _require(rl, "kind", str, lw)
        try:
            links.append(Link(src, dst, LinkKind(kind)))
        except ValueError as exc:
            raise AnnotationError(f"{lw}: {exc}") from None
    try:
        return DocumentAnnotation(image_path, width, height, tuple(segs), tuple(links))
    except ValueError as exc:
        raise AnnotationError(f"{where}.{exc}") from None


def load_annotations(path: str | os.PathLike) -> list[DocumentAnnotation]:
    """Read and validate an annotation file.

    Raises :class:`AnnotationError` naming the offending document and field
    on malformed JSON or on any broken invariant.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from None
    docs = _require(raw, "documents", list, "$")
    return [document_from_dict(d, f"documents[{i}]") for i, d in enumerate(docs)]


def dumps_annotations(docs: Iterable[DocumentAnnotation], extra: Sequence[dict] | None = None) -> str:
    payload = [document_to_dict(d) for d in docs]
    if extra is not None:
        for p, e in zip(payload, extra):
            p.update(e)
    return json.dumps({"documents": payload}, ensure_ascii=False, indent=1) + "\n"


def save_annotations(docs: Iterable[DocumentAnnotation], path: str | os.PathLike,
                     extra: Sequence[dict] | None = None) -> None:
    text = dumps_annotations(docs, extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def resolve_image_path(doc: DocumentAnnotation, annotation_file: str | os.PathLike | None) -> Path:
    p = Path(doc.image_path)
    if p.is_absolute() or annotation_file is None:
        return p
    return Path(annotation_file).resolve().parent / p


@dataclass
class UnionFind:
    """Disjoint sets over arbitrary hashable items."""

    parent: dict = field(default_factory=dict)

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        self.add(x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller representative wins so grouping is order independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self) -> list[list]:
        out: dict = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return sorted((sorted(g) for g in out.values()), key=lambda g: g[0])


def entity_groups(segment_ids: Iterable[int], intra_pairs: Iterable[tuple[int, int]]) -> list[list[int]]:
    """Connected components of the undirected intra-link graph."""
    uf = UnionFind()
    for i in segment_ids:
        uf.add(i)
    for a, b in intra_pairs:
        uf.union(a, b)
    return uf.groups()
