"""Index vectors for spans: static top-vote keys and confidence-sized dynamic sets.

Token votes are the attention a token receives from the window's queries.
The dynamic policy sizes each span's index from its confidence ratio ``r_a``
(span mass over span plus neighbour mass) through ``rv = exp(-lam * (1 - r_a))``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .span_divider import Span, SpanPartition
from .tri_attention import AttentionTile, TaScoreField

RATIO_MODES = ("row", "col", "rowcol")
DEFAULT_LAMBDA_GRID = (3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 20.0)


@dataclass(frozen=True)
class SpanIndex:
    span: Span
    vectors: np.ndarray  # (n, dim) float32
    source_tokens: tuple[int, ...]
    rv: float = 1.0
    ratio: float = 1.0

    @property
    def count(self) -> int:
        return len(self.source_tokens)

    def nbytes(self, bytes_per_value: int = 4) -> int:
        return int(self.vectors.shape[0] * self.vectors.shape[1] * bytes_per_value)


def token_votes(tile: AttentionTile, window: tuple[int, int] | None = None) -> np.ndarray:
    """Attention received by every key column, summed over heads and the query rows in ``window``."""
    if window is None:
        rows = tile.values
    else:
        r0, r1 = window
        if not 0 <= r0 <= r1 < tile.rows:
            raise IndexError(f"window {window} outside tile rows {tile.rows}")
        rows = tile.values[:, r0:r1 + 1]
    return rows.sum(axis=(0, 1), dtype=np.float64)


def top_tokens(votes: np.ndarray, lo: int, hi: int, n: int) -> np.ndarray:
    """The ``n`` highest-vote positions in ``lo..hi``, ties to the lower index, ascending."""
    idx = np.arange(lo, hi + 1)
    order = np.lexsort((idx, -votes[lo:hi + 1]))
    return np.sort(idx[order[:n]])


def _make_index(span: Span, keys: np.ndarray, votes: np.ndarray, n: int, rv_value: float, ratio: float) -> SpanIndex:
    toks = top_tokens(votes, span.start, span.end, n)
    vecs = np.ascontiguousarray(keys[toks], dtype=np.float32).reshape(len(toks), -1)
    return SpanIndex(span, vecs, tuple(toks.tolist()), rv_value, ratio)


def static_index(
    partition: SpanPartition, votes: np.ndarray, keys: np.ndarray, total: int, max_spans: int = 4
) -> list[SpanIndex]:
    """``total // max_spans`` top-vote keys per span, or the whole span when it is shorter."""
    if total < max_spans:
        raise ConfigError(f"total index vectors {total} smaller than spans per block {max_spans}")
    quota = total // max_spans
    out = []
    for s in partition.spans:
        n = min(quota, s.length)
        out.append(_make_index(s, keys, votes, n, n / s.length, 1.0))
    return out


def confidence_ratio(field: TaScoreField, partition: SpanPartition, span_idx: int, mode: str = "row") -> float:
    """``S / (S + neighbours)`` for one span; 1 when the neighbour mass is zero.

    Row neighbours are the span's rows over earlier spans' columns; column
    neighbours are the span's columns under later spans' rows.
    """
    if mode not in RATIO_MODES:
        raise ConfigError(f"ratio mode must be one of {RATIO_MODES}, got {mode!r}")
    s = partition.spans[span_idx]
    lo, hi = partition.start, partition.end
    own = field.mass(s.start, s.end)
    neighbours = 0.0
    if mode in ("row", "rowcol"):
        neighbours += field.region_sum(s.start, s.end, lo, s.start - 1)
    if mode in ("col", "rowcol"):
        neighbours += field.region_sum(s.end + 1, hi, s.start, s.end)
    if neighbours <= 0.0:
        return 1.0
    return min(1.0, max(0.0, own / (own + neighbours)))


def rv(r_a: float, lam: float) -> float:
    """Fraction of a span's tokens kept as index vectors."""
    return math.exp(-lam * (1.0 - r_a))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def vector_counts(
    lengths: Sequence[int],
    ratios: Sequence[float],
    lam: float,
    min_v: int = 1,
    max_per_span: int = 12,
    budget: int = 12,
) -> list[int]:
    """Per-span vector counts: clamp(round(L * rv)), then trim the largest until the block budget fits."""
    if budget < len(lengths) * min_v:
        raise ConfigError(f"budget {budget} cannot give {min_v} vector(s) to each of {len(lengths)} spans")
    counts = [
        min(length, max(min_v, min(max_per_span, _round_half_up(length * rv(r, lam)))))
        for length, r in zip(lengths, ratios)
    ]
    total = sum(counts)
    while total > budget:
        # list.index finds the lowest position holding the max
        counts[counts.index(max(counts))] -= 1
        total -= 1
    return counts


def dynamic_index(
    field: TaScoreField,
    partition: SpanPartition,
    keys: np.ndarray,
    votes: np.ndarray,
    lam: float,
    min_v: int = 1,
    max_per_span: int = 12,
    budget: int = 12,
    mode: str = "row",
) -> list[SpanIndex]:
    """Confidence-sized index sets for every span of ``partition``.

    ``keys`` and ``votes`` are indexed in the same coordinates as the field.
    """
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    ratios = [confidence_ratio(field, partition, i, mode) for i in range(partition.span_count)]
    lengths = [s.length for s in partition.spans]
    counts = vector_counts(lengths, ratios, lam, min_v, max_per_span, budget)
    # one vote ranking for the whole block, then each span takes its first n tokens in that order
    lo, hi = partition.start, partition.end
    idx = np.arange(lo, hi + 1)
    ranked = idx[np.lexsort((idx, -votes[lo:hi + 1]))]
    starts = np.array([s.start for s in partition.spans])
    owner = np.searchsorted(starts, ranked, side="right") - 1
    grouped = ranked[np.argsort(owner, kind="stable")]
    bounds = np.concatenate(([0], np.cumsum(lengths)))
    out = []
    for k, (s, n, r) in enumerate(zip(partition.spans, counts, ratios)):
        toks = np.sort(grouped[bounds[k]:bounds[k] + n])
        vecs = np.ascontiguousarray(keys[toks], dtype=np.float32).reshape(len(toks), -1)
        out.append(SpanIndex(s, vecs, tuple(toks.tolist()), rv(r, lam), r))
    return out


# -- per-layer lambda calibration --------------------------------------------


@dataclass
class LambdaTable:
    layer: int
    bins: list[tuple[float, float, float]]
    grid: list[tuple[float, float, float]] = field(default_factory=list)  # (lambda, expected vectors, ratio)

    def to_json(self) -> str:
        return json.dumps({
            "layer": self.layer,
            "bins": [{"lo": lo, "hi": hi, "p": p} for lo, hi, p in self.bins],
            "grid": [{"lambda": lam, "expected_vectors": e, "ratio": r} for lam, e, r in self.grid],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LambdaTable":
        d = json.loads(text)
        return cls(
            d["layer"],
            [(b["lo"], b["hi"], b["p"]) for b in d["bins"]],
            [(g["lambda"], g["expected_vectors"], g["ratio"]) for g in d["grid"]],
        )


def ratio_histogram(samples: Sequence[float], n_bins: int = 10) -> list[tuple[float, float, float]]:
    """Equal-width histogram of confidence ratios on [0, 1] as ``(lo, hi, probability)`` bins."""
    values = np.asarray(samples, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("no ratio samples to histogram")
    counts, edges = np.histogram(np.clip(values, 0.0, 1.0), bins=n_bins, range=(0.0, 1.0))
    probs = counts / counts.sum()
    return [(float(edges[i]), float(edges[i + 1]), float(probs[i])) for i in range(n_bins)]


def merge_histograms(parts: Sequence[Sequence[tuple[float, float, float]]], weights: Sequence[float]):
    """Weighted merge of histograms sharing the same bin edges."""
    total = float(sum(weights))
    first = parts[0]
    return [
        (lo, hi, sum(w * part[i][2] for part, w in zip(parts, weights)) / total)
        for i, (lo, hi, _) in enumerate(first)
    ]


def expected_vectors(
    bins: Sequence[tuple[float, float, float]],
    lam: float,
    span_length: float,
    spans_per_block: int,
    min_v: int = 1,
    max_per_span: int = 12,
    budget: int = 12,
) -> float:
    """Expected vectors per block, each bin represented by its midpoint ratio."""
    per_span = 0.0
    for lo, hi, p in bins:
        n = _round_half_up(span_length * rv((lo + hi) / 2.0, lam))
        per_span += p * min(span_length, max(min_v, min(max_per_span, n)))
    return min(float(budget), spans_per_block * per_span)


def calibrate_lambda(
    samples: Mapping[int, Sequence[float]] | None,
    layer: int,
    target_ratio: float,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    *,
    block_size: int = 128,
    spans_per_block: int = 4,
    min_v: int = 1,
    max_per_span: int = 12,
    budget: int = 12,
    n_bins: int = 10,
    bins: Sequence[tuple[float, float, float]] | None = None,
) -> tuple[float, LambdaTable]:
    """Smallest grid lambda whose expected tokens-per-vector ratio reaches ``target_ratio``.

    ``samples`` maps layer -> observed confidence ratios; pass ``bins`` instead
    to calibrate from a ready histogram.
    """
    grid = [float(g) for g in lambda_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("lambda grid must be non-empty and strictly ascending")
    if bins is None:
        if not samples or not samples.get(layer):
            raise ConfigError(f"no calibration samples for layer {layer}")
        bins = ratio_histogram(samples[layer], n_bins)
    span_length = block_size / spans_per_block
    table = LambdaTable(layer, [tuple(b) for b in bins])
    for lam in grid:
        e = expected_vectors(bins, lam, span_length, spans_per_block, min_v, max_per_span, budget)
        table.grid.append((lam, e, block_size / e))
    for lam, _, ratio in table.grid:
        if ratio >= target_ratio:
            return lam, table
    best = max(r for _, _, r in table.grid)
    raise ConfigError(f"no lambda in grid reaches ratio {target_ratio}; max achievable is {best:.4f}")
