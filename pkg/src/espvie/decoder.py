"""Inference: heatmap peaks to quads, EE/EL heads, link thresholding and entity aggregation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .doc_model import (
    CATEGORIES,
    AnnotationError,
    DocumentAnnotation,
    EntityCategory,
    EntitySegment,
    Link,
    LinkKind,
    QuadBox,
    document_from_dict,
    document_to_dict,
    entity_groups,
)
from .net import STRIDE, ESPNet, ctc_greedy_decode, gather_bundles
from .preprocess import resize_and_normalize, segment_geometry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecodeConfig:
    max_detections: int = 256
    heatmap_threshold: float = 0.3
    link_threshold: float = 0.5
    nms_kernel: int = 3

    def __post_init__(self):
        for name in ("heatmap_threshold", "link_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.max_detections < 1 or self.nms_kernel < 1 or self.nms_kernel % 2 == 0:
            raise ValueError("max_detections must be positive and nms_kernel a positive odd number")


class Peak(NamedTuple):
    x: float  # sub-cell center, stride-4 grid units
    y: float
    score: float
    ix: int  # peak cell
    iy: int


@dataclass
class PredictionGraph:
    segments: list[EntitySegment]
    category_scores: np.ndarray  # (N, 4)
    link_matrix: np.ndarray  # (N, N, K)
    intra_links: list[tuple[int, int]]
    inter_links: list[tuple[int, int]]
    entities: list[list[int]]
    entity_links: list[tuple[int, int]]  # indices into ``entities``
    entity_categories: list[EntityCategory] = field(default_factory=list)
    texts: dict[int, str] | None = None

    @property
    def links(self) -> list[Link]:
        return ([Link(a, b, LinkKind.INTRA) for a, b in self.intra_links]
                + [Link(a, b, LinkKind.INTER) for a, b in self.inter_links])

    def to_document(self, image_path: str, width: int, height: int) -> DocumentAnnotation:
        segs = self.segments
        if self.texts is not None:
            segs = [EntitySegment(s.id, s.box, self.texts.get(s.id, s.text), s.category) for s in segs]
        return DocumentAnnotation(image_path, width, height, tuple(segs), tuple(self.links))


def _argmax_low(scores: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest category index
    return int(np.argmax(scores))


def extract_peaks(heatmap, cfg: DecodeConfig = DecodeConfig(), offset=None) -> list[Peak]:
    """Local maxima of a ``(h, w)`` heatmap above threshold, best first.

    ``offset`` (``(2, h, w)``) adds the sub-cell correction read at each peak.
    """
    hm = torch.as_tensor(heatmap, dtype=torch.float64)
    if hm.dim() != 2:
        raise ValueError("heatmap must be 2-D")
    k = cfg.nms_kernel
    pooled = F.max_pool2d(hm[None, None], k, stride=1, padding=k // 2)[0, 0]
    keep = (hm == pooled) & (hm >= cfg.heatmap_threshold)
    ys, xs = keep.nonzero(as_tuple=True)
    scores = hm[ys, xs].tolist()
    cells = sorted(zip(scores, ys.tolist(), xs.tolist()), key=lambda t: (-t[0], t[1], t[2]))
    cells = cells[:cfg.max_detections]
    off = None if offset is None else torch.as_tensor(offset, dtype=torch.float64)
    out = []
    for score, iy, ix in cells:
        dx, dy = (0.0, 0.0) if off is None else (float(off[0, iy, ix]), float(off[1, iy, ix]))
        out.append(Peak(ix + dx, iy + dy, score, ix, iy))
    return out


def reconstruct_quads(peaks: Sequence[Peak], quad_map) -> tuple[list[Peak], list[QuadBox]]:
    """Quads in input pixels from peak centers plus the 8 regressed vertex offsets.

    Degenerate or self-intersecting quads are dropped together with their peak.
    """
    qm = torch.as_tensor(quad_map, dtype=torch.float64)
    kept, quads = [], []
    for p in peaks:
        rel = qm[:, p.iy, p.ix].reshape(4, 2).numpy()
        verts = (rel + np.array([p.x, p.y])) * STRIDE
        try:
            quads.append(QuadBox(tuple(map(tuple, verts.tolist()))))
        except ValueError as exc:
            log.info("dropping detection at cell (%d, %d): %s", p.ix, p.iy, exc)
            continue
        kept.append(p)
    return kept, quads


def aggregate_entities(segments: Sequence[EntitySegment], link_matrix,
                       cfg: DecodeConfig = DecodeConfig(), category_scores=None) -> PredictionGraph:
    """Threshold the link matrix and group segments into entities over intra-links.

    A two-channel matrix carries (intra, inter) probabilities; with one
    channel, a link joining two segments of the same category is intra.
    """
    segments = list(segments)
    n = len(segments)
    lm = np.asarray(link_matrix, dtype=np.float64)
    if lm.ndim == 2:
        lm = lm[..., None]
    if lm.shape[:2] != (n, n):
        raise ValueError(f"link matrix shape {lm.shape} does not match {n} segments")
    if category_scores is None:
        category_scores = np.zeros((n, len(CATEGORIES)))
        for i, s in enumerate(segments):
            category_scores[i, s.category.index] = 1.0
    category_scores = np.asarray(category_scores, dtype=np.float64).reshape(n, len(CATEGORIES))
    ids = [s.id for s in segments]
    intra, inter = [], []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            p = lm[i, j]
            if p.max() < cfg.link_threshold:
                continue
            if lm.shape[-1] >= 2:
                is_intra = p[0] >= p[1]
            else:
                is_intra = segments[i].category is segments[j].category
            (intra if is_intra else inter).append((ids[i], ids[j]))
    groups = entity_groups(ids, intra)
    owner = {sid: g for g, members in enumerate(groups) for sid in members}
    ent_links = sorted({(owner[a], owner[b]) for a, b in inter if owner[a] != owner[b]})
    pos = {sid: i for i, sid in enumerate(ids)}
    ent_cats = [CATEGORIES[_argmax_low(category_scores[[pos[s] for s in g]].sum(axis=0))] for g in groups]
    return PredictionGraph(segments, category_scores, lm, intra, inter, groups, ent_links, ent_cats)


@torch.no_grad()
def decode_document(image: np.ndarray, model: ESPNet, cfg: DecodeConfig = DecodeConfig(),
                    longer_side: int = 1024, gt_boxes: DocumentAnnotation | Sequence[QuadBox] | None = None,
                    recognize: bool | None = None) -> PredictionGraph:
    """Full inference on one ``(H, W, 3)`` image; quads come back in original pixels.

    Passing ``gt_boxes`` (a document or list of quads) bypasses detection and
    keeps the given segment ids.
    """
    was_training = model.training
    model.eval()
    try:
        x, record = resize_and_normalize(image, longer_side)
        dtype = next(model.parameters()).dtype
        p2, out = model(x[None].to(dtype))
        if gt_boxes is None:
            peaks = extract_peaks(out.heatmap[0, 0], cfg, out.offset[0])
            peaks, quads = reconstruct_quads(peaks, out.quad[0])
            centers = np.array([(p.x, p.y) for p in peaks], dtype=np.float64).reshape(-1, 2)
            ids = list(range(len(quads)))
            texts_in = [""] * len(quads)
        else:
            if isinstance(gt_boxes, DocumentAnnotation):
                ids = gt_boxes.ids
                texts_in = [s.text for s in gt_boxes.segments]
                src = [s.box for s in gt_boxes.segments]
            else:
                src = list(gt_boxes)
                ids = list(range(len(src)))
                texts_in = [""] * len(src)
            quads = [record.to_input(b) for b in src]
            centers = np.array([b.center for b in quads], dtype=np.float64).reshape(-1, 2) / STRIDE
        n = len(quads)
        if n == 0:
            return aggregate_entities([], np.zeros((0, 0, model.cfg.link_channels)), cfg)
        bundle = gather_bundles(out, centers, segment_geometry(quads, record.padded_size))
        cat_scores = model.ee_head(bundle).double().numpy()
        link = model.el_head(bundle).double().numpy()
        segments = [EntitySegment(ids[i], record.to_original(quads[i]), texts_in[i],
                                  CATEGORIES[_argmax_low(cat_scores[i])]) for i in range(n)]
        graph = aggregate_entities(segments, link, cfg, cat_scores)
        if recognize is None:
            recognize = model.recognizer is not None
        if recognize:
            logp = model.recognize(p2[0], quads)
            graph.texts = {ids[i]: ctc_greedy_decode(logp[i], model.cfg.charset) for i in range(n)}
        return graph
    finally:
        model.train(was_training)


def prediction_to_dict(graph: PredictionGraph, image_path: str, width: int, height: int,
                       link_threshold: float = DecodeConfig().link_threshold) -> dict:
    """Annotation-schema document extended with ``scores`` fields."""
    raw = document_to_dict(graph.to_document(image_path, width, height))
    for k, seg in enumerate(raw["segments"]):
        seg["scores"] = {c.value: float(v) for c, v in zip(CATEGORIES, graph.category_scores[k])}
    pos = {s.id: i for i, s in enumerate(graph.segments)}
    for lk in raw["links"]:
        ch = 0 if lk["kind"] == LinkKind.INTRA.value or graph.link_matrix.shape[-1] == 1 else 1
        lk["score"] = float(graph.link_matrix[pos[lk["source"]], pos[lk["target"]], ch])
    raw["scores"] = {
        "link_threshold": link_threshold,
        "link_matrix": graph.link_matrix.tolist(),
        "recognized": graph.texts is not None,
    }
    raw["entities"] = [{"segments": g, "category": c.value}
                       for g, c in zip(graph.entities, graph.entity_categories)]
    raw["entity_links"] = [list(p) for p in graph.entity_links]
    return raw


def prediction_from_dict(raw: dict, where: str = "documents[0]") -> PredictionGraph:
    """Rebuild a graph from :func:`prediction_to_dict` output by re-running aggregation."""
    doc = document_from_dict(raw, where)
    try:
        scores = raw["scores"]
        cat = np.array([[s["scores"][c.value] for c in CATEGORIES] for s in raw["segments"]],
                       dtype=np.float64).reshape(-1, len(CATEGORIES))
        lm = np.array(scores["link_matrix"], dtype=np.float64)
        n = len(doc.segments)
        lm = lm.reshape(n, n, -1) if n else np.zeros((0, 0, 2))
        cfg = DecodeConfig(link_threshold=float(scores["link_threshold"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"{where}: missing or malformed prediction scores ({exc})") from None
    graph = aggregate_entities(doc.segments, lm, cfg, cat)
    if scores.get("recognized"):
        graph.texts = {s.id: s.text for s in doc.segments}
    return graph


def save_predictions(items: Sequence[tuple[PredictionGraph, str, int, int]], path,
                     link_threshold: float = DecodeConfig().link_threshold) -> None:
    """Write ``(graph, image_path, width, height)`` tuples as one prediction file."""
    payload = {"documents": [prediction_to_dict(g, p, w, h, link_threshold) for g, p, w, h in items]}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False)
        fh.write("\n")


def load_predictions(path) -> list[tuple[PredictionGraph, DocumentAnnotation]]:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: malformed JSON ({exc})") from None
    docs = raw.get("documents") if isinstance(raw, dict) else None
    if not isinstance(docs, list):
        raise AnnotationError(f"{path}: expected an object with a 'documents' list")
    return [(prediction_from_dict(d, f"documents[{i}]"), document_from_dict(d, f"documents[{i}]"))
            for i, d in enumerate(docs)]
