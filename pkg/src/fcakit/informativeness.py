"""Attention-derived token informativeness and top-k fine/coarse partitioning.

A token's informativeness under one head is the attention mass every *other*
unmasked token draws from it (the off-diagonal column sum of the map); the
overall score averages heads. CLS is never ranked: it is always fine.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


class IntegrityError(ValueError):
    """Attention maps are not row-stochastic over unmasked columns."""


@dataclass
class InformativenessVector:
    scores: np.ndarray   # [m] or [B, m]; m = sequence length - 1 (CLS excluded)
    layer: int = 0


@dataclass
class Partition:
    fine_indices: list[int]
    coarse_indices: list[int]
    k: int


def _maps_4d(maps) -> np.ndarray:
    a = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"attention maps must be square per head, got shape {a.shape}")
    return a


def _mask_2d(mask, B: int, n: int) -> np.ndarray:
    if mask is None:
        return np.ones((B, n), dtype=bool)
    return np.broadcast_to(np.atleast_2d(np.asarray(mask, dtype=bool)), (B, n))


def score_weights(mask: np.ndarray) -> np.ndarray:
    """``[B, n, n]`` weight w[b, i, j] = 1 iff row i is real and i != j."""
    n = mask.shape[1]
    return mask[:, :, None] * (1.0 - np.eye(n))[None]


def score_tensor(maps: Tensor, mask: np.ndarray) -> Tensor:
    """Differentiable informativeness ``[B, n-1]`` (zero on padded columns)."""
    w = score_weights(mask)
    cols = (maps * w[:, None]).sum(axis=2).mean(axis=1)
    return cols[:, 1:] * mask[:, 1:].astype(np.float64)


def check_maps(a: np.ndarray, mask: np.ndarray, tol: float = 1e-6) -> None:
    rows = (a * mask[:, None, None, :]).sum(axis=-1)
    bad = np.abs(rows - 1.0) > tol
    bad &= mask[:, None, :]
    if bad.any():
        worst = np.abs(rows - 1.0)[bad].max()
        raise IntegrityError(f"attention rows deviate from 1 by up to {worst:.3g}")


def score_tokens(maps, mask=None, layer: int = 0, check: bool = True) -> InformativenessVector:
    """Informativeness of every non-CLS position.

    ``maps`` may be ``[n, n]``, ``[h, n, n]`` or ``[B, h, n, n]``; the result
    has shape ``[n-1]`` for unbatched input and ``[B, n-1]`` otherwise.
    """
    batched = (maps.data if isinstance(maps, Tensor) else np.asarray(maps)).ndim == 4
    a = _maps_4d(maps)
    B, _, n, _ = a.shape
    if n < 2:
        raise ValueError("need at least CLS plus one token to score")
    m = _mask_2d(mask, B, n)
    if check:
        check_maps(a, m)
    cols = np.einsum("bhij,bij->bhj", a, score_weights(m)).mean(axis=1)
    scores = np.where(m[:, 1:], cols[:, 1:], 0.0)
    return InformativenessVector(scores if batched else scores[0], layer)


def dispersion_stats(layer_scores: Sequence[np.ndarray],
                     layer_masks: Sequence[np.ndarray] | None = None) -> list[tuple[int, float, float]]:
    """Per-layer (layer, variance, std) of sum-normalised scores.

    Each entry of ``layer_scores`` is one layer's scores, ``[m]`` or ``[M, m]``
    for M examples; batched statistics are averaged over examples.
    """
    rows = []
    for layer, s in enumerate(layer_scores, start=1):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        masks = (np.ones(s.shape, dtype=bool) if layer_masks is None
                 else np.atleast_2d(np.asarray(layer_masks[layer - 1], dtype=bool)))
        var = []
        for row, keep in zip(s, masks):
            v = row[keep]
            total = v.sum()
            p = v / total if total > 0 else np.full(len(v), 1.0 / len(v))
            var.append(p.var())
        mean_var = float(np.mean(var))
        rows.append((layer, mean_var, float(np.mean(np.sqrt(var)))))
    return rows


def write_dispersion_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "normalized_variance", "normalized_std"])
        for layer, var, std in rows:
            writer.writerow([layer, repr(var), repr(std)])


def rank_order(scores: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Indices into ``scores`` from most to least informative.

    Ties go to the lower index; masked entries come last.
    """
    s = np.asarray(scores, dtype=np.float64)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    return np.argsort(-s, kind="stable")


def partition_topk(scores, k: int, mask=None) -> Partition:
    """Top-k non-CLS positions as fine tokens. Indices count CLS as 0."""
    s = scores.scores if isinstance(scores, InformativenessVector) else np.asarray(scores)
    if s.ndim != 1:
        raise ValueError("partition_topk works on one sequence; use per-row calls for batches")
    if not 0 <= k <= len(s):
        raise ValueError(f"k={k} outside [0, {len(s)}]")
    order = rank_order(s, mask)
    fine = sorted(int(i) + 1 for i in order[:k])
    coarse = sorted(int(i) + 1 for i in order[k:])
    return Partition(fine, coarse, k)
