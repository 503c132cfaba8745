"""Training losses: detection, image-text contrastive alignment, focal EE/EL and their weighted sums."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .doc_model import CATEGORIES, LINK_KINDS, DocumentAnnotation, EntityCategory, axis_aligned_bbox
from .net import STRIDE, EapOutputs

log = logging.getLogger(__name__)

PROB_EPS = 1e-6
HEATMAP_ALPHA = 2
HEATMAP_BETA = 4


class Phase(str, enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class LossWeights:
    lambda_el: float
    lambda_ee: float
    phase: Phase

    @classmethod
    def for_phase(cls, phase: Phase | str) -> "LossWeights":
        phase = Phase(phase)
        if phase is Phase.PRETRAIN:
            return cls(1.0, 10.0, phase)
        return cls(10.0, 200.0, phase)


# ------------------------------------------------------------------ detection


@dataclass
class DetectionTargets:
    heatmap: np.ndarray  # (h, w)
    quad: np.ndarray  # (8, h, w), filled at positives only
    offset: np.ndarray  # (2, h, w)
    positive: np.ndarray  # (h, w) bool
    centers: np.ndarray  # (K, 2) exact stride-4 centers of kept segments
    segment_ids: list[int]


def gaussian_radius(width: float, height: float) -> int:
    """Splat radius in stride-4 cells for a segment of the given axis-aligned size."""
    return max(1, int(math.floor(min(width, height) / 6)))


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    sigma = (2 * radius + 1) / 6
    h, w = heatmap.shape
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    patch = g[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
    np.maximum(heatmap[y0:y1, x0:x1], patch, out=heatmap[y0:y1, x0:x1])


def build_detection_targets(doc: DocumentAnnotation, map_size: tuple[int, int]) -> DetectionTargets:
    """Heatmap, quad and offset targets on a ``(h, w) = map_size`` stride-4 grid.

    ``doc`` must already be in model-input pixels.  Each segment's peak sits
    at the integer part of its exact center.
    """
    h, w = map_size
    heat = np.zeros((h, w), dtype=np.float64)
    quad = np.zeros((8, h, w), dtype=np.float64)
    off = np.zeros((2, h, w), dtype=np.float64)
    pos = np.zeros((h, w), dtype=bool)
    centers, ids = [], []
    for seg in doc.segments:
        xmin, ymin, xmax, ymax = (v / STRIDE for v in axis_aligned_bbox(seg.box))
        cx, cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
        ix, iy = int(math.floor(cx)), int(math.floor(cy))
        if not (0 <= ix < w and 0 <= iy < h):
            log.warning("segment %d center (%.2f, %.2f) outside %dx%d map, skipped", seg.id, cx, cy, w, h)
            continue
        if pos[iy, ix]:
            log.warning("segment %d shares center cell (%d, %d) with another segment", seg.id, ix, iy)
        draw_gaussian(heat, ix, iy, gaussian_radius(xmax - xmin, ymax - ymin))
        heat[iy, ix] = 1.0
        pos[iy, ix] = True
        verts = np.asarray(seg.box.vertices, dtype=np.float64) / STRIDE
        quad[:, iy, ix] = (verts - np.array([cx, cy])).reshape(-1)
        off[:, iy, ix] = (cx - ix, cy - iy)
        centers.append((cx, cy))
        ids.append(seg.id)
    return DetectionTargets(heat, quad, off, pos, np.asarray(centers, dtype=np.float64).reshape(-1, 2), ids)


def heatmap_focal_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss, normalised by the number of peaks."""
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    is_pos = target >= 1.0
    pos_term = -((1 - p) ** HEATMAP_ALPHA) * torch.log(p)
    neg_term = -((1 - target) ** HEATMAP_BETA) * (p ** HEATMAP_ALPHA) * torch.log(1 - p)
    loss = torch.where(is_pos, pos_term, neg_term).sum()
    return loss / max(int(is_pos.sum()), 1)


def detection_loss(outputs: EapOutputs, targets: Sequence[DetectionTargets]) -> dict[str, torch.Tensor]:
    """``heatmap + quad + offset`` over a batch; returns the components and ``total``."""
    ref = outputs.heatmap
    tgt_heat = torch.as_tensor(np.stack([t.heatmap for t in targets]), dtype=ref.dtype)
    pos = torch.as_tensor(np.stack([t.positive for t in targets]))
    tgt_quad = torch.as_tensor(np.stack([t.quad for t in targets]), dtype=ref.dtype)
    tgt_off = torch.as_tensor(np.stack([t.offset for t in targets]), dtype=ref.dtype)
    l_heat = heatmap_focal_loss(outputs.heatmap[:, 0], tgt_heat)
    if pos.any():
        mask = pos.unsqueeze(1)
        l_quad = (outputs.quad - tgt_quad).abs().masked_select(mask).mean()
        l_off = (outputs.offset - tgt_off).abs().masked_select(mask).mean()
    else:
        l_quad = l_off = ref.new_zeros(())
    return {"heatmap": l_heat, "quad": l_quad, "offset": l_off, "total": l_heat + l_quad + l_off}


# ------------------------------------------------------------------ alignment


def eitm_directions(vision: torch.Tensor, text: torch.Tensor,
                    tau: float | torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean vision-to-text and text-to-vision InfoNCE terms over matched rows."""
    n = vision.shape[0]
    if n == 0:
        zero = vision.new_zeros(())
        return zero, zero
    for name, x in (("vision", vision), ("text", text)):
        norms = x.detach().norm(dim=-1)
        if (norms - 1).abs().max() > 1e-3:
            warnings.warn(f"{name} embeddings are not L2-normalised; normalising", stacklevel=3)
    v = F.normalize(vision, dim=-1)
    t = F.normalize(text, dim=-1)
    logits = v @ t.t() / tau
    labels = torch.arange(n)
    return F.cross_entropy(logits, labels), F.cross_entropy(logits.t(), labels)


def eitm_loss(vision: torch.Tensor, text: torch.Tensor, tau: float | torch.Tensor) -> torch.Tensor:
    """Symmetric InfoNCE between matched rows, each direction averaged over pairs."""
    v2t, t2v = eitm_directions(vision, text, tau)
    return v2t + t2v


# ---------------------------------------------------------------------- focal


def focal_loss(pred: torch.Tensor, target: torch.Tensor, gamma: float = 4.0,
               reduction: str = "mean") -> torch.Tensor:
    """Elementwise binary focal loss, averaged over all elements unless ``reduction="none"``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if pred.numel() == 0:
        return pred.new_zeros(()) if reduction == "mean" else pred.new_zeros(pred.shape)
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    target = target.to(p.dtype)
    pos = -((1 - p) ** gamma) * torch.log(p)
    neg = -(p ** gamma) * torch.log(1 - p)
    out = torch.where(target > 0.5, pos, neg)
    return out.mean() if reduction == "mean" else out


def category_indices(labels: Iterable) -> torch.Tensor:
    out = []
    for lab in labels:
        if isinstance(lab, (int, np.integer)) and not isinstance(lab, bool):
            if not 0 <= lab < len(CATEGORIES):
                raise ValueError(f"category index {lab} out of range")
            out.append(int(lab))
        else:
            try:
                out.append(EntityCategory(lab).index)
            except ValueError:
                raise ValueError(f"unknown category {lab!r}") from None
    return torch.as_tensor(out, dtype=torch.long)


def ee_loss(probs: torch.Tensor, labels, gamma: float = 4.0) -> torch.Tensor:
    idx = category_indices(labels)
    target = F.one_hot(idx, probs.shape[-1]).to(probs.dtype)
    return focal_loss(probs, target, gamma)


ALL = "all"


def link_targets(n: int, gt_links, channels: int) -> torch.Tensor:
    """``(N, N, channels)`` binary targets.

    ``gt_links`` is one set of ordered pairs (single channel) or a sequence
    of ``channels`` sets, one per link kind.
    """
    if channels == 1 and isinstance(gt_links, (set, frozenset)):
        per_kind = [gt_links]
    elif isinstance(gt_links, (set, frozenset)):
        raise ValueError("multi-channel link probabilities need one pair set per channel")
    else:
        per_kind = list(gt_links)
    if len(per_kind) != channels:
        raise ValueError(f"expected {channels} link sets, got {len(per_kind)}")
    t = torch.zeros((n, n, channels))
    for k, pairs in enumerate(per_kind):
        for i, j in pairs:
            t[i, j, k] = 1.0
    return t


def el_loss(link_probs: torch.Tensor, gt_links, mask=ALL, gamma: float = 4.0) -> torch.Tensor:
    """Focal loss over off-diagonal link entries selected by ``mask``.

    ``link_probs`` is ``(N, N)`` or ``(N, N, K)``; ``mask`` is ``"all"`` or a
    set of ordered pairs.  A positive pair outside the mask is an error.
    """
    probs = link_probs if link_probs.dim() == 3 else link_probs.unsqueeze(-1)
    n, _, k = probs.shape
    target = link_targets(n, gt_links, k).to(probs.dtype)
    sel = ~torch.eye(n, dtype=torch.bool)
    if mask != ALL:
        allowed = torch.zeros((n, n), dtype=torch.bool)
        for i, j in mask:
            allowed[i, j] = True
        outside = (target.amax(dim=-1) > 0) & ~allowed
        if outside.any():
            bad = outside.nonzero()[0].tolist()
            raise ValueError(f"ground-truth link {tuple(bad)} lies outside the loss mask")
        sel &= allowed
    return focal_loss(probs[sel], target[sel], gamma)


# ------------------------------------------------------------------- combined


def combined_loss(phase: Phase | str, components: Mapping[str, torch.Tensor | float],
                  weights: LossWeights | None = None):
    """Phase-weighted total of ``det``, ``eitm`` (pretrain), ``rec`` (finetune), ``el``, ``ee``."""
    phase = Phase(phase)
    weights = weights or LossWeights.for_phase(phase)
    present = {k for k, v in components.items() if v is not None}
    required = {"det", "el", "ee"} | ({"eitm"} if phase is Phase.PRETRAIN else set())
    missing = required - present
    if missing:
        raise ValueError(f"{phase.value} loss needs components {sorted(missing)}")
    if phase is Phase.FINETUNE and "eitm" in present:
        raise ValueError("the alignment loss only exists in pre-training")
    if phase is Phase.PRETRAIN and "rec" in present:
        raise ValueError("the recognition loss only exists in fine-tuning")
    unknown = present - {"det", "eitm", "rec", "el", "ee"}
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    total = components["det"] + weights.lambda_el * components["el"] + weights.lambda_ee * components["ee"]
    for extra in ("eitm", "rec"):
        if extra in present:
            total = total + components[extra]
    return total


def ctc_loss(log_probs: torch.Tensor, targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean CTC loss for ``(N, T, C)`` log-probabilities with blank index 0."""
    n, t, _ = log_probs.shape
    if n == 0:
        return log_probs.new_zeros(())
    flat = torch.as_tensor([c for seq in targets for c in seq], dtype=torch.long)
    lengths = torch.as_tensor([len(s) for s in targets], dtype=torch.long)
    return F.ctc_loss(log_probs.transpose(0, 1), flat, torch.full((n,), t, dtype=torch.long),
                      lengths, blank=0, reduction="mean", zero_infinity=True)


__all__ = [
    "ALL", "DetectionTargets", "LINK_KINDS", "LossWeights", "Phase", "build_detection_targets",
    "combined_loss", "ctc_loss", "detection_loss", "ee_loss", "eitm_directions", "eitm_loss", "el_loss", "focal_loss",
    "heatmap_focal_loss",
]
