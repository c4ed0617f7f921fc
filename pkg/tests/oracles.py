"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np


def triangle_sum(values: np.ndarray, x: int, y: int) -> float:
    """Attention mass in rows x..y and cols x..y, summed over heads."""
    return float(values[:, x:y + 1, x:y + 1].sum(dtype=np.float64))


def all_triangle_sums(values: np.ndarray) -> np.ndarray:
    n = values.shape[-1]
    out = np.full((n, n), np.nan)
    summed = values.astype(np.float64).sum(axis=0)
    for x in range(n):
        for y in range(x, n):
            out[y, x] = summed[x:y + 1, x:y + 1].sum()
    return out


def triangle_sums_by_anchor(values: np.ndarray) -> np.ndarray:
    """Same table as ``all_triangle_sums`` by direct summation per anchor column, vectorized."""
    n = values.shape[-1]
    out = np.full((n, n), np.nan)
    summed = values.astype(np.float64).sum(axis=0)
    for x in range(n):
        block = summed[x:, x:]
        # rows x..y, cols x..y of the sub-block starting at (x, x)
        rect = np.cumsum(np.cumsum(block, axis=1), axis=0)
        out[x:, x] = np.diagonal(rect)
    return out


def square_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) + 1 - max(a[0], b[0]))
    if inter == 0:
        return 0.0
    la, lb = a[1] - a[0] + 1, b[1] - b[0] + 1
    i2 = float(inter) * float(inter)
    return i2 / (float(la) * la + float(lb) * lb - i2)


def naive_nms(cands: list[tuple[int, int, float]], phi: float) -> set[tuple[int, int, float]]:
    """Keep a candidate iff no already-kept candidate overlaps it above ``phi``."""
    order = sorted(cands, key=lambda c: (-c[2], c[0], c[1]))
    kept: list[tuple[int, int, float]] = []
    ks = np.zeros(0, dtype=np.int64)
    ke = np.zeros(0, dtype=np.int64)
    for c in order:
        if ks.size:
            inter = np.minimum(ke, c[1]) + 1 - np.maximum(ks, c[0])
            inter = np.maximum(inter, 0).astype(np.float64)
            la = float(c[1] - c[0] + 1)
            lb = (ke - ks + 1).astype(np.float64)
            i2 = inter * inter
            with np.errstate(divide="ignore", invalid="ignore"):
                ious = np.where(inter > 0, i2 / (la * la + lb * lb - i2), 0.0)
            if (ious > phi).any():
                continue
        kept.append(c)
        ks = np.append(ks, c[0])
        ke = np.append(ke, c[1])
    return set(kept)


def anti_diagonal_argmax(thresholded: np.ndarray, lo: int, hi: int) -> dict[int, tuple[int, int, float]]:
    """For each anti-diagonal x+y with a positive best point, that point (lowest x on ties)."""
    out = {}
    for k in range(2 * lo, 2 * hi + 1):
        best = None
        for x in range(lo, hi + 1):
            y = k - x
            if y < x or y > hi:
                continue
            v = thresholded[y, x]
            if best is None or v > best[2]:
                best = (x, y, float(v))
        if best is not None and best[2] > 0:
            out[k] = best
    return out


def partition_violations(spans, lo: int, hi: int, max_spans: int) -> list[str]:
    errs = []
    if not 1 <= len(spans) <= max_spans:
        errs.append(f"span count {len(spans)} outside 1..{max_spans}")
    owner = np.zeros(hi - lo + 1, dtype=np.int64)
    for s in spans:
        if s.start > s.end:
            errs.append(f"empty span {s}")
            continue
        if s.start < lo or s.end > hi:
            errs.append(f"span {s} leaves block [{lo}, {hi}]")
            continue
        owner[s.start - lo:s.end - lo + 1] += 1
    if (owner != 1).any():
        errs.append("tokens not covered exactly once")
    starts = [s.start for s in spans]
    if starts != sorted(starts):
        errs.append("spans not sorted")
    return errs


def pairwise_similarity(q: np.ndarray, k: np.ndarray) -> float:
    total = 0.0
    for a in q:
        for b in k:
            total += float(np.dot(a.astype(np.float64), b.astype(np.float64)))
    return total


def lru_hits(capacity: int, accesses: list[int]) -> tuple[int, int]:
    cache: OrderedDict[int, None] = OrderedDict()
    hits = misses = 0
    for a in accesses:
        if a in cache:
            hits += 1
            cache.move_to_end(a)
        else:
            misses += 1
            cache[a] = None
            if len(cache) > capacity:
                cache.popitem(last=False)
    return hits, misses


def weighted_tally(per_layer: dict[int, list[int]], weights: dict[int, float], k: int) -> list[int]:
    score: dict[int, float] = {}
    for layer, blocks in per_layer.items():
        for b in blocks[:k]:
            score[b] = score.get(b, 0.0) + weights[layer]
    ranked = sorted(score, key=lambda b: (-score[b], b))
    return ranked[:k]


def clamp_reduce(lengths, ratios, lam, min_v, max_per_span, budget) -> list[int]:
    """Vector counts: clamp each span, then repeatedly take one from the largest (lowest index on ties)."""
    counts = []
    for length, r in zip(lengths, ratios):
        n = int(math.floor(length * math.exp(-lam * (1 - r)) + 0.5))
        counts.append(min(length, max(min_v, min(max_per_span, n))))
    while sum(counts) > budget:
        m = max(counts)
        counts[counts.index(m)] -= 1
    return counts


def region_mass(values: np.ndarray, r0: int, r1: int, c0: int, c1: int) -> float:
    if r0 > r1 or c0 > c1:
        return 0.0
    return float(values[:, r0:r1 + 1, c0:c1 + 1].sum(dtype=np.float64))


def random_stochastic_tile(rng: np.random.Generator, heads: int, n: int, scale: float = 1.0) -> np.ndarray:
    """Causal row-stochastic tile from random logits."""
    logits = rng.normal(0, scale, (heads, n, n))
    mask = np.tril(np.ones((n, n), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=2, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=2, keepdims=True)
    return w.astype(np.float32)
