"""Cosine similarity between stored embeddings."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ZeroVector
from .gateway import Embedding


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """dot(a, b) / (|a| |b|), clamped to [-1, 1] against rounding.

    Bit-identical inputs short-circuit to exactly 1.0: cos(v, v) is 1 by
    definition, and the short-circuit keeps the store's determinism
    round-trip exact instead of one float64 ulp off.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims differ: {a.dim} vs {b.dim}")
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for the zero vector")
    if np.array_equal(a.values, b.values):
        return 1.0
    sim = float(np.dot(av, bv) / (na * nb))
    return max(-1.0, min(1.0, sim))
