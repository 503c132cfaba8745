"""Aspect-preserving resize, padding to the stride grid, and channel normalisation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .doc_model import DocumentAnnotation, EntitySegment, QuadBox, axis_aligned_bbox

PAD_MULTIPLE = 32
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ScaleRecord:
    orig_size: tuple[int, int]  # (w, h)
    content_size: tuple[int, int]
    padded_size: tuple[int, int]

    @property
    def scale(self) -> tuple[float, float]:
        return (self.content_size[0] / self.orig_size[0], self.content_size[1] / self.orig_size[1])

    def to_input(self, box: QuadBox) -> QuadBox:
        sx, sy = self.scale
        return box.scaled(sx, sy)

    def to_original(self, box: QuadBox) -> QuadBox:
        sx, sy = self.scale
        return box.scaled(1 / sx, 1 / sy)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resized_shape(width: int, height: int, longer_side: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Content and padded ``(w, h)`` after resizing the longer side to ``longer_side``."""
    if width <= 0 or height <= 0:
        raise ValueError(f"zero-area image {width}x{height}")
    s = longer_side / max(width, height)
    cw, ch = max(1, _round_half_up(width * s)), max(1, _round_half_up(height * s))
    pad = lambda v: PAD_MULTIPLE * math.ceil(v / PAD_MULTIPLE)  # noqa: E731
    return (cw, ch), (pad(cw), pad(ch))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def resize_and_normalize(image: np.ndarray, longer_side: int) -> tuple[torch.Tensor, ScaleRecord]:
    """``(H, W, 3)`` uint8 image -> normalised ``(3, H', W')`` float tensor and its scale record."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    (cw, ch), (pw, ph) = resized_shape(w, h, longer_side)
    pil = Image.fromarray(image.astype(np.uint8))
    if (cw, ch) != (w, h):
        pil = pil.resize((cw, ch), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(CHANNEL_MEAN, dtype=np.float32)) / np.asarray(CHANNEL_STD, dtype=np.float32)
    out = np.zeros((ph, pw, 3), dtype=np.float32)
    out[:ch, :cw] = arr
    return torch.from_numpy(out.transpose(2, 0, 1).copy()), ScaleRecord((w, h), (cw, ch), (pw, ph))


def scale_document(doc: DocumentAnnotation, record: ScaleRecord) -> DocumentAnnotation:
    """Annotation mapped into model-input pixel coordinates."""
    segs = tuple(EntitySegment(s.id, record.to_input(s.box), s.text, s.category) for s in doc.segments)
    pw, ph = record.padded_size
    return DocumentAnnotation(doc.image_path, pw, ph, segs, doc.links)


def segment_geometry(boxes, padded_size: tuple[int, int]) -> np.ndarray:
    """Normalised ``(xmin, ymin, xmax, ymax, w, h)`` per box, in input pixels over the padded size."""
    pw, ph = padded_size
    rows = []
    for b in boxes:
        xmin, ymin, xmax, ymax = axis_aligned_bbox(b)
        rows.append((xmin / pw, ymin / ph, xmax / pw, ymax / ph, (xmax - xmin) / pw, (ymax - ymin) / ph))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 6)
