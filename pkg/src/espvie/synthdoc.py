"""Seeded synthetic key-value documents with exact segment, category and link annotations."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

from .doc_model import (
    DocumentAnnotation,
    EntityCategory,
    EntitySegment,
    Link,
    LinkKind,
    QuadBox,
    save_annotations,
)
from .font5x7 import render_text

log = logging.getLogger(__name__)

DEFAULT_KEYS = (
    "NAME", "DATE", "TOTAL", "TAX", "PHONE", "ADDRESS", "INVOICE NO", "AMOUNT", "CASHIER",
    "STORE", "TIME", "ITEM", "QTY", "PRICE", "ORDER NO", "ACCOUNT", "DUE DATE", "REF",
)
HEADERS = ("INVOICE", "RECEIPT", "BILL OF ENTRY", "STATEMENT", "SALES SLIP")
FOOTERS = ("THANK YOU", "PAGE 1", "COPY", "NO REFUND", "WELCOME")
# segment centers are kept on distinct cells of this grid so that stride-4
# targets stay collision free down to half resolution
CENTER_GRID = 8


@dataclass
class SynthConfig:
    seed: int = 0
    num_docs: int = 20
    image_size: tuple[int, int] = (512, 512)  # (w, h)
    key_vocabulary: tuple[str, ...] = DEFAULT_KEYS
    value_alphabet: str = "0123456789ABCDEFGHJKLMNPRSTUVWXYZ./-"
    max_pairs_per_doc: int = 6
    multiline_value_prob: float = 0.3
    rotation_jitter_deg: float = 0.0
    overlap_prob: float = 0.0
    font_scale: int = 2
    noise_std: float = 6.0
    blur_prob: float = 0.3

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.key_vocabulary = tuple(self.key_vocabulary)
        for name in ("multiline_value_prob", "overlap_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_docs < 1 or self.max_pairs_per_doc < 1:
            raise ValueError("num_docs and max_pairs_per_doc must be positive")
        if self.rotation_jitter_deg < 0:
            raise ValueError("rotation_jitter_deg must be non-negative")
        if len(self.key_vocabulary) < self.max_pairs_per_doc:
            raise ValueError("key vocabulary smaller than max_pairs_per_doc")


@dataclass
class _Seg:
    text: str
    category: EntityCategory
    x: float  # top-left of the unrotated box
    y: float
    w: float
    h: float
    angle: float = 0.0
    mask: np.ndarray = field(default=None, repr=False)

    @property
    def center(self):
        return (self.x + self.w / 2, self.y + self.h / 2)

    def corners(self):
        cx, cy = self.center
        t = math.radians(self.angle)
        c, s = math.cos(t), math.sin(t)
        out = []
        for dx, dy in ((-self.w / 2, -self.h / 2), (self.w / 2, -self.h / 2),
                       (self.w / 2, self.h / 2), (-self.w / 2, self.h / 2)):
            # counter-clockwise on screen, y pointing down
            out.append((cx + dx * c + dy * s, cy - dx * s + dy * c))
        return out


def _make_seg(text, category, x, y, scale) -> _Seg:
    mask = render_text(text, scale)
    pad = scale
    h, w = mask.shape
    return _Seg(text, category, float(x), float(y), float(w + 2 * pad), float(h + 2 * pad), mask=mask)


def _random_value(rng, alphabet, lo=4, hi=10) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(i)] for i in rng.integers(0, len(alphabet), n))


def _cell(seg: _Seg):
    cx, cy = seg.center
    return (int(cx // CENTER_GRID), int(cy // CENTER_GRID))


def _inside(seg: _Seg, width, height) -> bool:
    return all(-0.5 <= x <= width + 0.5 and -0.5 <= y <= height + 0.5 for x, y in seg.corners())


def _layout(cfg: SynthConfig, rng: np.random.Generator, n_pairs: int):
    """Place header, pairs and footer; returns (segments, pairs) or None if they do not fit."""
    width, height = cfg.image_size
    s = cfg.font_scale
    line_h = 9 * s
    row_h = line_h + int(rng.integers(3, 7)) * s
    margin = 4 * s
    segs: list[_Seg] = []
    y = margin + float(rng.integers(0, 4 * s + 1))
    header = _make_seg(HEADERS[int(rng.integers(len(HEADERS)))], EntityCategory.HEADER, 0, y, s)
    header.x = float(rng.integers(margin, max(margin + 1, int(width - header.w - margin))))
    segs.append(header)
    y += row_h + 2 * s
    keys = rng.choice(len(cfg.key_vocabulary), size=n_pairs, replace=False)
    pairs = []  # (key index, [value segment indices])
    for k in keys:
        key = _make_seg(cfg.key_vocabulary[int(k)] + ":", EntityCategory.QUESTION,
                        margin + float(rng.integers(0, 6 * s + 1)), y, s)
        n_lines = 2 if rng.random() < cfg.multiline_value_prob else 1
        vx = key.x + key.w + float(rng.integers(2, 10)) * s
        room = int((width - margin - vx - 2 * s) // (6 * s))
        if room < 2:
            return None
        values = []
        for line in range(n_lines):
            text = _random_value(rng, cfg.value_alphabet, 2 if room < 4 else 4, min(10, room))
            values.append(_make_seg(text, EntityCategory.ANSWER, vx, y + line * row_h, s))
        segs.append(key)
        first = len(segs)
        segs.extend(values)
        pairs.append((first - 1, list(range(first, first + n_lines))))
        y += n_lines * row_h
    footer = _make_seg(FOOTERS[int(rng.integers(len(FOOTERS)))], EntityCategory.OTHER, 0, y + s, s)
    footer.x = float(rng.integers(margin, max(margin + 1, int(width - footer.w - margin))))
    segs.append(footer)
    if footer.y + footer.h > height - margin or any(sg.x + sg.w > width for sg in segs):
        return None
    return segs, pairs


def _perturb(cfg: SynthConfig, rng: np.random.Generator, segs, pairs) -> None:
    width, height = cfg.image_size
    if cfg.rotation_jitter_deg > 0:
        for sg in segs:
            a = float(rng.uniform(-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg))
            sg.angle = a
            if not _inside(sg, width, height):
                sg.angle = 0.0
    for key_idx, vals in pairs:
        if cfg.overlap_prob > 0 and rng.random() < cfg.overlap_prob:
            key, val = segs[key_idx], segs[vals[0]]
            shift = (val.x - (key.x + key.w)) + float(rng.integers(1, 4)) * cfg.font_scale
            val.x -= shift
            cells = {_cell(sg) for i, sg in enumerate(segs) if i != vals[0]}
            if _cell(val) in cells or not _inside(val, width, height):
                val.x += shift


def _render(cfg: SynthConfig, rng: np.random.Generator, segs) -> np.ndarray:
    width, height = cfg.image_size
    base = float(rng.uniform(200, 245))
    gx, gy = rng.uniform(-25, 25, size=2)
    yy, xx = np.mgrid[0:height, 0:width]
    canvas = base + gx * (xx / width - 0.5) + gy * (yy / height - 0.5)
    for sg in segs:
        ink = float(rng.uniform(0, 70))
        pad = cfg.font_scale
        mh, mw = sg.mask.shape
        patch = np.zeros((mh + 2 * pad, mw + 2 * pad), dtype=np.uint8)
        patch[pad:pad + mh, pad:pad + mw] = sg.mask * 255
        img = Image.fromarray(patch)
        if sg.angle:
            img = img.rotate(sg.angle, resample=Image.BILINEAR, expand=True)
        alpha = np.asarray(img, dtype=np.float64) / 255.0
        ph, pw = alpha.shape
        cx, cy = sg.center
        x0, y0 = int(round(cx - pw / 2)), int(round(cy - ph / 2))
        xs0, ys0 = max(0, x0), max(0, y0)
        xs1, ys1 = min(width, x0 + pw), min(height, y0 + ph)
        if xs1 <= xs0 or ys1 <= ys0:
            continue
        a = alpha[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0]
        region = canvas[ys0:ys1, xs0:xs1]
        canvas[ys0:ys1, xs0:xs1] = region * (1 - a) + ink * a
    canvas += rng.normal(0.0, cfg.noise_std, size=canvas.shape)
    img = Image.fromarray(np.clip(canvas, 0, 255).astype(np.uint8))
    if rng.random() < cfg.blur_prob:
        img = img.filter(ImageFilter.GaussianBlur(float(rng.uniform(0.3, 1.0))))
    tint = rng.uniform(0.9, 1.0, size=3)
    rgb = np.asarray(img, dtype=np.float64)[..., None] * tint
    return np.clip(rgb, 0, 255).astype(np.uint8)


def generate_document(cfg: SynthConfig, index: int, image_path: str = "") -> tuple[DocumentAnnotation, np.ndarray]:
    """One document and its RGB image; randomness depends only on ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    n_pairs = int(rng.integers(1, cfg.max_pairs_per_doc + 1))
    while True:
        placed = _layout(cfg, rng, n_pairs)
        if placed is not None:
            segs, pairs = placed
            _perturb(cfg, rng, segs, pairs)
            if len({_cell(sg) for sg in segs}) == len(segs):
                break
        if n_pairs == 1 and placed is None:
            raise ValueError(f"cannot fit a single key-value pair into {cfg.image_size}")
        log.debug("doc %d: layout with %d pairs failed, retrying with fewer", index, n_pairs)
        n_pairs = max(1, n_pairs - 1)
    width, height = cfg.image_size
    segments = tuple(
        EntitySegment(i, QuadBox(tuple(sg.corners())), sg.text, sg.category) for i, sg in enumerate(segs))
    links = []
    for key_idx, vals in pairs:
        links.append(Link(key_idx, vals[0], LinkKind.INTER))
        links.extend(Link(a, b, LinkKind.INTRA) for a, b in zip(vals, vals[1:]))
    doc = DocumentAnnotation(image_path, width, height, segments, tuple(links))
    return doc, _render(cfg, rng, segs)


def _write_one(args):
    cfg, index, out_dir = args
    rel = f"images/doc_{index:05d}.png"
    doc, image = generate_document(cfg, index, rel)
    Image.fromarray(image).save(Path(out_dir) / rel, format="PNG")
    return doc


ANNOTATION_FILE = "annotations.json"


def generate_corpus(cfg: SynthConfig, out_dir: str | os.PathLike, workers: int = 1) -> list[DocumentAnnotation]:
    """Write ``images/doc_XXXXX.png`` plus ``annotations.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, i, str(out)) for i in range(cfg.num_docs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            docs = list(ex.map(_write_one, jobs))
    else:
        docs = [_write_one(j) for j in jobs]
    save_annotations(docs, out / ANNOTATION_FILE)
    return docs
