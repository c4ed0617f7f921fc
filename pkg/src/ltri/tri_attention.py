"""Causal attention tiles and triangle-attention (TA) scores.

A tile holds ``H`` attention maps of shape ``(rows, cols)``.  Query row ``i``
sits at key position ``cols - rows + i``, so a square tile is the usual
lower-triangular map and a one-row tile is a single decode query.

The TA score of a span ``[x, y]`` is the attention mass inside the triangle
``rows x..y, cols x..y`` summed over heads.  Because everything above the
diagonal is zero, that triangle equals the rectangle ``rows 0..y, cols x..N-1``,
which a two-axis cumulative sum gives for every ``(x, y)`` in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, InvalidTrace

ROW_SUM_TOL = 1e-3


@dataclass(frozen=True)
class AttentionTile:
    """Per-head causal attention, ``values`` shaped ``(H, rows, cols)`` float32."""

    values: np.ndarray
    layer: int = 0
    start: int = 0  # global token index of column 0

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] < 1 or v.shape[1] < 1 or v.shape[1] > v.shape[2]:
            raise InvalidTrace(f"tile must be (H, rows<=cols, cols), got {v.shape}")
        rows = v.sum(axis=2, dtype=np.float64)
        if not np.isfinite(rows).all():
            raise InvalidTrace("tile contains non-finite entries")
        if v.min() < 0:
            raise InvalidTrace("tile contains negative entries")
        # entries are non-negative here, so zero hidden mass means all hidden cells are zero
        if (v.reshape(v.shape[0], -1) @ _hidden(v.shape[1], v.shape[2]).ravel()).any():
            raise InvalidTrace("tile has nonzero entries above the causal diagonal")
        if rows.max() > 1.0 + ROW_SUM_TOL:
            raise InvalidTrace("tile row mass exceeds 1")

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    def square(self, lo: int, hi: int) -> "AttentionTile":
        """Square sub-tile over key positions ``lo..hi`` (inclusive), rows included."""
        if self.rows != self.cols:
            raise InvalidTrace("sub-tiles are only defined on square tiles")
        return AttentionTile(self.values[:, lo:hi + 1, lo:hi + 1], self.layer, self.start + lo)


@lru_cache(maxsize=64)
def _hidden(rows: int, cols: int) -> np.ndarray:
    m = (~causal_mask(rows, cols)).astype(np.float32)
    m.flags.writeable = False
    return m


def causal_mask(rows: int, cols: int) -> np.ndarray:
    """Boolean mask, True where key ``j`` is visible to query row ``i``."""
    offset = cols - rows
    return np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)


def build_tile(raw_scores, apply_softmax: bool = False, layer: int = 0, start: int = 0) -> AttentionTile:
    """Mask (and optionally softmax) raw per-head scores into an :class:`AttentionTile`.

    ``raw_scores`` is ``(rows, cols)`` or ``(H, rows, cols)``.  With
    ``apply_softmax`` the entries are logits and each row is normalized over its
    visible keys; otherwise they must already be non-negative weights and the
    part above the diagonal is simply zeroed.
    """
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    if raw.ndim != 3 or raw.shape[1] < 1 or raw.shape[1] > raw.shape[2]:
        raise InvalidTrace(f"raw scores must be (H, rows<=cols, cols), got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise InvalidTrace("raw scores contain non-finite entries")
    mask = causal_mask(raw.shape[1], raw.shape[2])
    if apply_softmax:
        logits = np.where(mask, raw, -np.inf)
        logits -= logits.max(axis=2, keepdims=True)
        weights = np.exp(logits)
        weights /= weights.sum(axis=2, keepdims=True)
    else:
        if np.any(raw < 0):
            raise InvalidTrace("negative attention weight without softmax")
        weights = np.where(mask, raw, 0.0)
    return AttentionTile(weights.astype(np.float32), layer, start)


def theta_from_quantile(tile: AttentionTile, q: float) -> float:
    """Absolute threshold at quantile ``q`` of the tile's nonzero entries."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"theta quantile must lie in [0, 1], got {q}")
    nz = tile.values[tile.values > 0]
    if nz.size == 0:
        return 0.0
    # linear interpolation between the two bracketing order statistics
    h = (nz.size - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, nz.size - 1)
    part = np.partition(nz, (lo, hi) if hi != lo else lo)
    a, b = float(part[lo]), float(part[hi])
    return a + (h - lo) * (b - a)


@lru_cache(maxsize=32)
def triangle_counts(n: int) -> np.ndarray:
    """``T[y, x] = (y-x+1)(y-x+2)/2`` cells in the triangle of span ``[x, y]``; 0 above the diagonal."""
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    t = (d + 1) * (d + 2) / 2.0
    t = np.where(d >= 0, t, 0.0)
    t.flags.writeable = False
    return t


@dataclass(frozen=True)
class TaScoreField:
    """TA scores for every span of a square tile.

    ``cumulative[y, x]`` is the unthresholded score of span ``[x, y]`` (and the
    generic corner prefix sum elsewhere); ``thresholded[y, x]`` subtracts
    ``H * theta`` per triangle cell and is ``-inf`` where ``x > y``.
    """

    layer: int
    n: int
    heads: int
    theta: float
    cumulative: np.ndarray
    thresholded: np.ndarray

    def score(self, x: int, y: int) -> float:
        return ta_score(self, x, y)

    def mass(self, x: int, y: int) -> float:
        """Unthresholded triangle mass of span ``[x, y]``."""
        _check_span(self.n, x, y)
        return float(self.cumulative[y, x])

    def region_sum(self, r0: int, r1: int, c0: int, c1: int) -> float:
        """Attention mass in rows ``r0..r1`` x cols ``c0..c1`` (inclusive); 0 for empty ranges."""
        if r0 > r1 or c0 > c1:
            return 0.0
        p = self.cumulative

        def at(r, c):
            if r < 0 or c >= self.n:
                return 0.0
            return p[r, c]

        return float(at(r1, c0) - at(r0 - 1, c0) - at(r1, c1 + 1) + at(r0 - 1, c1 + 1))


@lru_cache(maxsize=32)
def _upper(n: int) -> np.ndarray:
    m = np.arange(n)[None, :] > np.arange(n)[:, None]
    m.flags.writeable = False
    return m


def ta_field(tile: AttentionTile, theta: float) -> TaScoreField:
    """Compute the TA score field of a square tile in O(H*N^2)."""
    if not 0.0 <= theta < 1.0:
        raise ConfigError(f"theta must lie in [0, 1), got {theta}")
    if tile.rows != tile.cols:
        raise InvalidTrace("TA scores need a square tile")
    n = tile.cols
    summed = tile.values.sum(axis=0, dtype=np.float64)
    prefix = np.cumsum(summed, axis=0)
    prefix = np.cumsum(prefix[:, ::-1], axis=1)[:, ::-1]
    penalty = tile.heads * theta * triangle_counts(n)
    thresholded = np.where(_upper(n), -np.inf, prefix - penalty)
    return TaScoreField(tile.layer, n, tile.heads, float(theta), prefix, thresholded)


def _check_span(n: int, x: int, y: int) -> None:
    if not (0 <= x <= y < n):
        raise IndexError(f"span [{x}, {y}] invalid for field of size {n}")


def ta_score(field: TaScoreField, x: int, y: int) -> float:
    """Thresholded TA score of span ``[x, y]``."""
    _check_span(field.n, x, y)
    return float(field.thresholded[y, x])
