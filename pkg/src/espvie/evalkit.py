"""Entity extraction / linking / detection F1 under the three input-restriction modes."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from shapely.geometry import Polygon

from .doc_model import CATEGORIES, DocumentAnnotation, LinkKind, QuadBox, entity_groups
from .decoder import PredictionGraph

NED_THRESHOLD = 0.3


class RestrictionMode(str, enum.Enum):
    GT_INPUT = "gt_input"
    PRED_BOXES = "pred_boxes"
    PRED_BOXES_AND_TEXT = "pred_boxes_and_text"


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def prf(self) -> tuple[float, float, float]:
        return (self.precision, self.recall, self.f1)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: str, b: str) -> float:
    if not a and not b:
        return 0.0
    return levenshtein(a, b) / max(len(a), len(b))


def polygon_iou(a: QuadBox, b: QuadBox) -> float:
    pa, pb = Polygon(a.vertices), Polygon(b.vertices)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def match_boxes(pred: list[QuadBox], gt: list[QuadBox], iou_threshold: float = 0.5) -> dict[int, int]:
    """Greedy one-to-one matching by descending IoU; returns ``{pred_index: gt_index}``."""
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            iou = polygon_iou(p, g)
            if iou >= iou_threshold:
                cands.append((-iou, i, j))
    cands.sort()
    out: dict[int, int] = {}
    used: set[int] = set()
    for _, i, j in cands:
        if i not in out and j not in used:
            out[i] = j
            used.add(j)
    return out


# -------------------------------------------------------------- entity setup


@dataclass
class _GtEntities:
    groups: list[frozenset[int]]
    categories: list
    texts: list[str]
    links: set[tuple[int, int]]


def gt_entities(doc: DocumentAnnotation) -> _GtEntities:
    groups = entity_groups(doc.ids, [lk.pair for lk in doc.links_of_kind(LinkKind.INTRA)])
    owner = {sid: g for g, members in enumerate(groups) for sid in members}
    seg = {s.id: s for s in doc.segments}
    cats = [seg[g[0]].category for g in groups]
    texts = [" ".join(seg[s].text for s in g) for g in groups]
    links = {(owner[lk.source], owner[lk.target]) for lk in doc.links_of_kind(LinkKind.INTER)
             if owner[lk.source] != owner[lk.target]}
    return _GtEntities([frozenset(g) for g in groups], cats, texts, links)


def _segment_mapping(pred: PredictionGraph, gt: DocumentAnnotation, mode: RestrictionMode,
                     iou_threshold: float) -> dict[int, int]:
    """Predicted segment id -> GT segment id."""
    if mode is RestrictionMode.GT_INPUT:
        gt_ids = set(gt.ids)
        pred_ids = [s.id for s in pred.segments]
        if set(pred_ids) != gt_ids or len(pred_ids) != len(gt_ids):
            raise ValueError("gt_input mode needs predicted segments to carry exactly the GT ids")
        return {i: i for i in pred_ids}
    m = match_boxes([s.box for s in pred.segments], [s.box for s in gt.segments], iou_threshold)
    return {pred.segments[i].id: gt.segments[j].id for i, j in m.items()}


def _pred_texts(pred: PredictionGraph) -> dict[int, str]:
    if pred.texts is not None:
        return pred.texts
    return {s.id: s.text for s in pred.segments}


def _entity_mapping(pred: PredictionGraph, gt: DocumentAnnotation, gte: _GtEntities,
                    mode: RestrictionMode, iou_threshold: float) -> dict[int, int]:
    """Predicted entity index -> GT entity index for entities whose segments map exactly."""
    seg_map = _segment_mapping(pred, gt, mode, iou_threshold)
    index = {g: k for k, g in enumerate(gte.groups)}
    out = {}
    texts = _pred_texts(pred)
    for e, members in enumerate(pred.entities):
        if not all(m in seg_map for m in members):
            continue
        mapped = frozenset(seg_map[m] for m in members)
        if len(mapped) != len(members) or mapped not in index:
            continue
        g = index[mapped]
        if mode is RestrictionMode.PRED_BOXES_AND_TEXT:
            order = sorted(members, key=lambda m: seg_map[m])
            text = " ".join(texts.get(m, "") for m in order)
            if normalized_edit_distance(text, gte.texts[g]) >= NED_THRESHOLD:
                continue
        out[e] = g
    return out


def _check_mode(pred, mode) -> RestrictionMode:
    mode = RestrictionMode(mode)
    if mode is RestrictionMode.PRED_BOXES_AND_TEXT and pred.texts is None and not any(
            s.text for s in pred.segments):
        raise ValueError("pred_boxes_and_text mode needs recognised texts in the prediction")
    return mode


def ee_counts(pred: PredictionGraph, gt: DocumentAnnotation, mode="gt_input",
              iou_threshold: float = 0.5) -> tuple[Counts, dict]:
    mode = _check_mode(pred, mode)
    gte = gt_entities(gt)
    emap = _entity_mapping(pred, gt, gte, mode, iou_threshold)
    total = Counts()
    per_cat = {c.value: Counts() for c in CATEGORIES}
    hit_gt = set()
    for e, cat in enumerate(pred.entity_categories):
        g = emap.get(e)
        if g is not None and gte.categories[g] is cat and g not in hit_gt:
            hit_gt.add(g)
            total.tp += 1
            per_cat[cat.value].tp += 1
        else:
            total.fp += 1
            per_cat[cat.value].fp += 1
    for g, cat in enumerate(gte.categories):
        if g not in hit_gt:
            total.fn += 1
            per_cat[cat.value].fn += 1
    return total, per_cat


def el_counts(pred: PredictionGraph, gt: DocumentAnnotation, mode="gt_input",
              iou_threshold: float = 0.5) -> Counts:
    mode = _check_mode(pred, mode)
    gte = gt_entities(gt)
    emap = _entity_mapping(pred, gt, gte, mode, iou_threshold)
    c = Counts()
    hit = set()
    for a, b in set(pred.entity_links):
        pair = (emap.get(a), emap.get(b))
        if None not in pair and pair in gte.links and pair not in hit:
            hit.add(pair)
            c.tp += 1
        else:
            c.fp += 1
    c.fn = len(gte.links) - len(hit)
    return c


def score_ee(pred: PredictionGraph, gt: DocumentAnnotation, mode="gt_input",
             iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """Entity-level (precision, recall, f1): the entity must map exactly onto a GT entity
    with the same category."""
    return ee_counts(pred, gt, mode, iou_threshold)[0].prf()


def score_el(pred: PredictionGraph, gt: DocumentAnnotation, mode="gt_input",
             iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """Entity-level directed link (precision, recall, f1)."""
    return el_counts(pred, gt, mode, iou_threshold).prf()


def det_counts(pred: PredictionGraph, gt: DocumentAnnotation, iou_threshold: float = 0.5) -> Counts:
    m = match_boxes([s.box for s in pred.segments], [s.box for s in gt.segments], iou_threshold)
    return Counts(len(m), len(pred.segments) - len(m), len(gt.segments) - len(m))


@dataclass
class ScoreReport:
    mode: RestrictionMode
    ee: Counts = field(default_factory=Counts)
    el: Counts = field(default_factory=Counts)
    det: Counts = field(default_factory=Counts)
    per_category: dict = field(default_factory=lambda: {c.value: Counts() for c in CATEGORIES})
    documents: int = 0

    @property
    def ee_f1(self) -> float:
        return self.ee.f1

    @property
    def el_f1(self) -> float:
        return self.el.f1

    @property
    def det_f1(self) -> float:
        return self.det.f1

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "documents": self.documents,
            "ee_f1": self.ee_f1,
            "el_f1": self.el_f1,
            "det_f1": self.det_f1,
            "ee": self.ee.to_dict(),
            "el": self.el.to_dict(),
            "det": self.det.to_dict(),
            "per_category": {k: v.to_dict() for k, v in self.per_category.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("metric", "P", "R", "F1", "tp", "fp", "fn")]
        for name, c in [("EE", self.ee), ("EL", self.el), ("DET", self.det)] + [
                (f"EE/{k}", v) for k, v in self.per_category.items()]:
            rows.append((name, f"{c.precision:.4f}", f"{c.recall:.4f}", f"{c.f1:.4f}",
                         str(c.tp), str(c.fp), str(c.fn)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows)


def evaluate(preds: list[PredictionGraph], gts: list[DocumentAnnotation], mode="gt_input",
             iou_threshold: float = 0.5) -> ScoreReport:
    """Micro-averaged report: per-document counts are summed before computing P/R/F1."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth documents")
    report = ScoreReport(RestrictionMode(mode))
    for p, g in zip(preds, gts):
        tot, per = ee_counts(p, g, mode, iou_threshold)
        report.ee += tot
        for k, v in per.items():
            report.per_category[k] += v
        report.el += el_counts(p, g, mode, iou_threshold)
        report.det += det_counts(p, g, iou_threshold)
        report.documents += 1
    return report
