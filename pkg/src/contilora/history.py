"""Consolidation of past adapters into a fixed-rank history.

The main route sums every frozen ``b @ a`` of a layer and keeps the top-r
singular directions, split evenly between the two factors. ``strategy_random``
and ``strategy_summation`` are the cheaper alternatives used in ablations.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import matcore
from .errors import DimensionError, UndefinedInputError
from .lora import HistoryFactors, LoraAdapter

CompressedHistory = HistoryFactors


def _require(adapters: Sequence[LoraAdapter]) -> None:
    if len(adapters) == 0:
        raise UndefinedInputError("at least one adapter is required")
    shape = adapters[0].shape
    for ad in adapters[1:]:
        if ad.shape != shape:
            raise DimensionError(f"adapter shapes {shape} and {ad.shape} differ")


def merge_sum(adapters: Sequence[LoraAdapter]) -> np.ndarray:
    """Sum of ``b @ a`` over the adapters."""
    _require(adapters)
    total = np.zeros(adapters[0].shape)
    for ad in adapters:
        total += ad.b @ ad.a
    return total


def compress_svd(adapters: Sequence[LoraAdapter], r: int) -> CompressedHistory:
    """Best rank-``r`` balanced factorisation of the merged adapters."""
    merged = merge_sum(adapters)
    res = matcore.svd(merged)
    b, a = matcore.factors_from_svd(res, r)
    if np.any(res.singular_values > 0):
        energy = matcore.energy_proportion(res.singular_values, r)
    else:
        energy = 1.0  # nothing to lose
    return CompressedHistory(b, a, energy, len(adapters))


def strategy_random(adapters: Sequence[LoraAdapter], rng: np.random.Generator) -> LoraAdapter:
    """One past adapter drawn uniformly; callers redraw every step."""
    _require(adapters)
    return adapters[int(rng.integers(len(adapters)))]


def strategy_summation(adapters: Sequence[LoraAdapter]) -> CompressedHistory:
    """Factor-wise sums ``(sum b_i, sum a_i)``.

    Their product carries cross terms ``b_i @ a_j`` and so differs from
    :func:`merge_sum` unless the ``a`` factors coincide.
    """
    _require(adapters)
    ranks = {ad.rank for ad in adapters}
    if len(ranks) != 1:
        raise DimensionError(f"summation needs equal ranks, got {sorted(ranks)}")
    b = np.sum([ad.b for ad in adapters], axis=0)
    a = np.sum([ad.a for ad in adapters], axis=0)
    return CompressedHistory(b, a, None, len(adapters))


def reconstruction_similarity(adapters: Sequence[LoraAdapter], r: int) -> float:
    """Cosine similarity between the merged weights and their rank-r reconstruction."""
    hist = compress_svd(adapters, r)
    return matcore.cosine_similarity_flat(merge_sum(adapters), hist.delta())


def reconstruction_similarity_per_task(adapters: Sequence[LoraAdapter], r: int) -> list[float]:
    """Cosine similarity of each task's own ``b @ a`` with the merged reconstruction."""
    recon = compress_svd(adapters, r).delta()
    return [matcore.cosine_similarity_flat(ad.b @ ad.a, recon) for ad in adapters]
