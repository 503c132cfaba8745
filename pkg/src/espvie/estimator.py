"""scikit-learn style wrapper: ``fit`` fine-tunes, ``predict`` decodes, ``score`` reports F1."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import build_config
from .decoder import DecodeConfig, PredictionGraph, decode_document
from .doc_model import DocumentAnnotation
from .evalkit import RestrictionMode, evaluate
from .preprocess import load_image
from .training import build_model, run_finetune


def check_images(X) -> list[np.ndarray]:
    """Accept image paths or ``(H, W, 3)`` uint8 arrays; returns arrays."""
    if isinstance(X, (str, Path, np.ndarray)):
        X = [X]
    out = []
    for i, x in enumerate(X):
        if isinstance(x, (str, Path)):
            x = load_image(x)
        x = np.asarray(x)
        if x.ndim == 2:
            x = np.repeat(x[..., None], 3, axis=2)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ValueError(f"image {i}: expected shape (H, W, 3), got {x.shape}")
        if x.shape[0] == 0 or x.shape[1] == 0:
            raise ValueError(f"image {i}: zero-area image")
        out.append(x.astype(np.uint8, copy=False))
    if not out:
        raise ValueError("no images given")
    return out


def check_documents(X: Sequence[np.ndarray], y) -> list[DocumentAnnotation]:
    if y is None:
        raise ValueError("labels are required")
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"{len(X)} images but {len(y)} annotations")
    for i, (img, doc) in enumerate(zip(X, y)):
        if not isinstance(doc, DocumentAnnotation):
            raise TypeError(f"annotation {i} is {type(doc).__name__}, not DocumentAnnotation")
        if (doc.width, doc.height) != (img.shape[1], img.shape[0]):
            raise ValueError(f"annotation {i} is {doc.width}x{doc.height} but the image is "
                             f"{img.shape[1]}x{img.shape[0]}")
    return y


class ESPExtractor(BaseEstimator):
    """Joint segment detection, entity extraction and entity linking.

    ``predict`` returns one :class:`PredictionGraph` per image.  With
    ``gt_input=True`` the annotation boxes passed to ``predict``/``score`` are
    used in place of detected ones.
    """

    def __init__(self, profile="desk", overrides=None, gt_input=False, link_threshold=0.5,
                 heatmap_threshold=0.3, work_dir=None):
        self.profile = profile
        self.overrides = overrides
        self.gt_input = gt_input
        self.link_threshold = link_threshold
        self.heatmap_threshold = heatmap_threshold
        self.work_dir = work_dir

    def _config(self):
        return build_config(self.profile, overrides={k: str(v) for k, v in (self.overrides or {}).items()})

    def fit(self, X, y):
        X = check_images(X)
        y = check_documents(X, y)
        cfg = self._config()
        self.config_ = cfg
        self.model_ = build_model(cfg)
        if self.work_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                run_finetune(cfg, y, self.model_, tmp, images=X)
            self.checkpoint_ = None
        else:
            self.checkpoint_ = run_finetune(cfg, y, self.model_, self.work_dir, images=X)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("ESPExtractor is not fitted yet; call fit first")

    def predict(self, X, y=None) -> list[PredictionGraph]:
        self._check_fitted()
        X = check_images(X)
        if self.gt_input:
            y = check_documents(X, y)
        dcfg = DecodeConfig(heatmap_threshold=self.heatmap_threshold, link_threshold=self.link_threshold)
        return [decode_document(x, self.model_, dcfg, self.config_.resize_longer_side,
                                gt_boxes=y[i] if self.gt_input else None) for i, x in enumerate(X)]

    def score(self, X, y) -> float:
        """Mean of entity-extraction and entity-linking F1."""
        X = check_images(X)
        y = check_documents(X, y)
        mode = RestrictionMode.GT_INPUT if self.gt_input else RestrictionMode.PRED_BOXES
        report = evaluate(self.predict(X, y), y, mode)
        return 0.5 * (report.ee_f1 + report.el_f1)
