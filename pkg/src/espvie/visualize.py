"""Prediction-versus-ground-truth overlays: green where a prediction is right, red where wrong."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .decoder import PredictionGraph
from .doc_model import DocumentAnnotation, LinkKind
from .evalkit import match_boxes

GREEN = (0, 170, 0)
RED = (220, 0, 0)


def _gt_mapping(graph: PredictionGraph, gt: DocumentAnnotation, iou_threshold: float) -> dict[int, int]:
    if [s.id for s in graph.segments] == list(gt.ids):
        boxes_equal = all(p.box == g.box for p, g in zip(graph.segments, gt.segments))
        if boxes_equal:
            return {s.id: s.id for s in graph.segments}
    m = match_boxes([s.box for s in graph.segments], [s.box for s in gt.segments], iou_threshold)
    return {graph.segments[i].id: gt.segments[j].id for i, j in m.items()}


def render_overlay(image: np.ndarray, graph: PredictionGraph, gt: DocumentAnnotation,
                   iou_threshold: float = 0.5, width: int = 2) -> np.ndarray:
    """Predicted quads coloured by category correctness, links by presence in the ground truth."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    to_gt = _gt_mapping(graph, gt, iou_threshold)
    gt_seg = {s.id: s for s in gt.segments}
    gt_links = {(lk.source, lk.target, lk.kind) for lk in gt.links}
    centers = {}
    for s in graph.segments:
        g = to_gt.get(s.id)
        ok = g is not None and gt_seg[g].category is s.category
        pts = [tuple(v) for v in s.box.vertices]
        draw.line(pts + [pts[0]], fill=GREEN if ok else RED, width=width)
        centers[s.id] = s.box.center
    for kind, pairs in ((LinkKind.INTRA, graph.intra_links), (LinkKind.INTER, graph.inter_links)):
        for a, b in pairs:
            ok = (to_gt.get(a), to_gt.get(b), kind) in gt_links
            draw.line([centers[a], centers[b]], fill=GREEN if ok else RED, width=max(1, width - 1))
            bx, by = centers[b]
            draw.ellipse([bx - 2 * width, by - 2 * width, bx + 2 * width, by + 2 * width],
                         fill=GREEN if ok else RED)
    return np.asarray(canvas)
