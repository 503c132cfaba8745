"""Entity text embeddings for image-text alignment.

The network never reads text at inference; these vectors only supervise the
alignment loss during pre-training.
"""

from __future__ import annotations

import hashlib
import os
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np


class TextEmbedder(Protocol):
    dim: int

    def __call__(self, texts: Sequence[str]) -> np.ndarray: ...


class EncoderUnavailableError(RuntimeError):
    pass


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return x / n


class HashEmbedder:
    """Deterministic bag of hashed character trigrams and words.

    Needs no model download; strings sharing n-grams get correlated vectors.
    """

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._token = lru_cache(maxsize=65536)(self._token_vector)

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    @staticmethod
    def tokens(text: str) -> list[str]:
        padded = f"^{text}$"
        grams = [padded[i:i + 3] for i in range(max(1, len(padded) - 2))]
        return grams + [f"w:{w}" for w in text.split()]

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            for tok in self.tokens(t):
                out[i] += self._token(tok)
        return _unit_rows(out)


class SentenceTransformerEmbedder:
    """Adapter over a sentence-transformers model, projected to ``dim`` with a fixed seeded map."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2", dim: int = 512,
                 seed: int = 0, cache_dir: str | None = None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - depends on the environment
            raise EncoderUnavailableError("sentence-transformers is not installed") from exc
        cache_dir = cache_dir or os.environ.get("ESP_CACHE_DIR")
        try:
            self.model = SentenceTransformer(model_name, cache_folder=cache_dir)
        except Exception as exc:  # pragma: no cover - network / cache failures
            raise EncoderUnavailableError(f"cannot load text encoder {model_name!r}: {exc}") from exc
        self.dim = dim
        width = self.model.get_sentence_embedding_dimension()
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((width, dim)) / np.sqrt(width)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:  # pragma: no cover - needs model weights
        emb = np.asarray(self.model.encode(list(texts), convert_to_numpy=True), dtype=np.float64)
        return _unit_rows(emb @ self.projection)


def make_embedder(kind: str = "hash", dim: int = 512, seed: int = 0, **kwargs) -> TextEmbedder:
    if kind == "hash":
        return HashEmbedder(dim, seed)
    if kind in ("sentence-transformers", "st"):
        return SentenceTransformerEmbedder(dim=dim, seed=seed, **kwargs)
    raise EncoderUnavailableError(f"unknown text encoder {kind!r}")


def embed_entity_texts(texts: Sequence[str], embedder: TextEmbedder | None = None) -> np.ndarray:
    """One L2-normalised row per text."""
    if embedder is None:
        raise EncoderUnavailableError("no text encoder configured and no fallback selected")
    return embedder(texts)
