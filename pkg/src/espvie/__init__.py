"""Document entity extraction and linking with segments represented as semantic center points."""

from .decoder import DecodeConfig, PredictionGraph, decode_document
from .doc_model import (
    DocumentAnnotation,
    EntityCategory,
    EntitySegment,
    Link,
    LinkKind,
    QuadBox,
    load_annotations,
    save_annotations,
)
from .estimator import ESPExtractor
from .evalkit import RestrictionMode, ScoreReport, evaluate, score_ee, score_el
from .net import ESPNet, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "DecodeConfig", "DocumentAnnotation", "ESPExtractor", "ESPNet", "EntityCategory", "EntitySegment",
    "Link", "LinkKind", "ModelConfig", "PredictionGraph", "QuadBox", "RestrictionMode", "ScoreReport",
    "decode_document", "evaluate", "load_annotations", "save_annotations", "score_ee", "score_el",
]
