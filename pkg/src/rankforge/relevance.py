"""Relevance scores between captions, used as graded image-caption relevance.

An image is represented by the caption it is paired with in the batch, so
relevance of (image i, caption j) is the rescaled cosine between caption
embeddings of that representative and of j.
"""

from __future__ import annotations

import numpy as np


class BatchCompositionError(ValueError):
    """A batch repeats a caption id."""


class CaptionEmbeddings:
    """Caption embedding matrix with rows normalized to unit length at load."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("caption embeddings must be a matrix")
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError(f"caption {int(np.flatnonzero(norms == 0)[0])} has a zero embedding")
        m /= norms
        m.setflags(write=False)
        self.matrix = m

    def __len__(self):
        return self.matrix.shape[0]

    def _check(self, idx):
        idx = np.asarray(idx)
        if np.any(idx < 0) or np.any(idx >= len(self)):
            raise IndexError(f"caption index out of bounds for {len(self)} captions")

    def text_similarity(self, i: int, j: int) -> float:
        self._check([i, j])
        return float(np.clip(self.matrix[i] @ self.matrix[j], -1.0, 1.0))

    def relevance_score(self, i: int, j: int) -> float:
        return (1.0 + self.text_similarity(i, j)) / 2.0

    def cross_relevance(self, rows, cols) -> np.ndarray:
        """Relevance of every caption in ``rows`` against every one in ``cols``."""
        rows, cols = np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)
        self._check(rows)
        self._check(cols)
        cos = np.clip(self.matrix[rows] @ self.matrix[cols].T, -1.0, 1.0)
        return (1.0 + cos) / 2.0

    def batch_relevance(self, batch_caption_ids) -> np.ndarray:
        ids = np.asarray(batch_caption_ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise BatchCompositionError("duplicate caption id in batch")
        r = self.cross_relevance(ids, ids)
        # self-similarity is exactly 1 by definition; pin it against rounding
        np.fill_diagonal(r, 1.0)
        return r


def text_similarity(e: CaptionEmbeddings, i: int, j: int) -> float:
    return e.text_similarity(i, j)


def relevance_score(e: CaptionEmbeddings, i: int, j: int) -> float:
    return e.relevance_score(i, j)


def batch_relevance(e: CaptionEmbeddings, batch_caption_ids) -> np.ndarray:
    return e.batch_relevance(batch_caption_ids)
