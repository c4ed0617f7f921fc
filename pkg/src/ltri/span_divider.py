"""Split a block into semantic spans from its TA score field.

Pipeline: best point per anti-diagonal -> greedy NMS -> disjoint partition of
the block, with filler spans for gaps and left-merging down to ``max_spans``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from ._kernels import claim_runs, nms_ranked
from .errors import ConfigError
from .tri_attention import AttentionTile, TaScoreField, ta_field, theta_from_quantile

DEFAULT_THETA_QUANTILE = 0.9
DEFAULT_IOU_THRESHOLD = 0.1
THETA_SEARCH = (0.0001, 0.95)
PHI_SEARCH = (0.01, 0.95)


@dataclass(frozen=True)
class Span:
    """Token interval ``[start, end]`` (inclusive) with its thresholded TA score."""

    start: int
    end: int
    score: float = 0.0

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    @property
    def anti_diagonal(self) -> int:
        return self.start + self.end

    def overlaps(self, lo: int, hi: int) -> bool:
        return self.start <= hi and lo <= self.end

    def shifted(self, offset: int) -> "Span":
        return Span(self.start + offset, self.end + offset, self.score)


SpanCandidate = Span


@dataclass(frozen=True)
class SpanPartition:
    block_id: int
    spans: tuple[Span, ...]
    detected: tuple[bool, ...] = ()  # True for NMS survivors, False for fillers/merges

    @property
    def span_count(self) -> int:
        return len(self.spans)

    @property
    def start(self) -> int:
        return self.spans[0].start

    @property
    def end(self) -> int:
        return self.spans[-1].end

    def boundaries(self) -> list[int]:
        """Start positions of every span after the first."""
        return [s.start for s in self.spans[1:]]

    def is_valid(self, lo: int, hi: int, max_spans: int) -> bool:
        if not 1 <= len(self.spans) <= max_spans:
            return False
        pos = lo
        for s in self.spans:
            if s.start != pos or s.end < s.start:
                return False
            pos = s.end + 1
        return pos == hi + 1


@lru_cache(maxsize=16)
def _anti_diagonal_gather(n: int) -> np.ndarray:
    """Flat ``y*n + x`` indices of each anti-diagonal's lower-triangle points, padded with ``n*n``."""
    width = (n + 1) // 2 + 1
    gather = np.full((2 * n - 1, width), n * n, dtype=np.int64)
    for k in range(2 * n - 1):
        xs = np.arange(max(0, k - (n - 1)), k // 2 + 1)
        gather[k, : xs.size] = (k - xs) * n + xs
    return gather


def _candidate_arrays(field: TaScoreField, block_range: tuple[int, int]):
    lo, hi = block_range
    if hi < lo:
        raise IndexError(f"empty block range {block_range}")
    if lo < 0 or hi >= field.n:
        raise IndexError(f"block range {block_range} outside field of size {field.n}")
    n = hi - lo + 1
    sub = field.thresholded[lo:hi + 1, lo:hi + 1]
    flat = np.append(sub.ravel(), -np.inf)
    vals = flat[_anti_diagonal_gather(n)]
    best = np.argmax(vals, axis=1)
    scores = vals[np.arange(vals.shape[0]), best]
    k = np.flatnonzero(scores > 0)
    x = np.maximum(0, k - (n - 1)) + best[k]
    return lo + x, lo + k - x, scores[k]


def generate_candidates(field: TaScoreField, block_range: tuple[int, int]) -> list[Span]:
    """Best-scoring span on each anti-diagonal of the block, keeping only positive scores."""
    starts, ends, scores = _candidate_arrays(field, block_range)
    return [Span(int(a), int(b), float(c)) for a, b, c in zip(starts, ends, scores)]


def iou(a: Span, b: Span) -> float:
    """IoU of the squares ``(x, x)-(y+1, y+1)`` spanned by each interval."""
    inter = max(0, min(a.end, b.end) + 1 - max(a.start, b.start))
    if inter == 0:
        return 0.0
    inter2 = float(inter * inter)
    return inter2 / (a.length ** 2 + b.length ** 2 - inter2)


def _order(candidates: Sequence[Span]) -> list[Span]:
    return sorted(candidates, key=lambda s: (-s.score, s.start, s.end))


def _nms_arrays(starts: np.ndarray, ends: np.ndarray, scores: np.ndarray, phi: float) -> np.ndarray:
    """Indices of greedy NMS survivors, in rank order."""
    if not 0.0 < phi < 1.0:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {phi}")
    rank = np.lexsort((ends, starts, -scores))
    s = np.ascontiguousarray(starts[rank], dtype=np.int64)
    e = np.ascontiguousarray(ends[rank], dtype=np.int64)
    return rank[nms_ranked(s, e, float(phi))]


def nms(candidates: Sequence[Span], phi: float) -> list[Span]:
    """Greedy non-maximum suppression; survivors returned sorted by start."""
    if not 0.0 < phi < 1.0:
        raise ConfigError(f"IoU threshold must lie in (0, 1), got {phi}")
    if not candidates:
        return []
    starts = np.array([s.start for s in candidates])
    ends = np.array([s.end for s in candidates])
    scores = np.array([s.score for s in candidates], dtype=np.float64)
    keep = _nms_arrays(starts, ends, scores, phi)
    return sorted((candidates[i] for i in keep), key=lambda s: (s.start, s.end))


def _interval_score(field: TaScoreField | None, start: int, end: int, fallback: float) -> float:
    return float(field.thresholded[end, start]) if field is not None else fallback


def complete_partition(
    kept: Sequence[Span],
    block_range: tuple[int, int],
    max_spans: int,
    field: TaScoreField | None = None,
    block_id: int = 0,
) -> SpanPartition:
    """Turn NMS survivors into a disjoint, covering partition of at most ``max_spans`` spans.

    Survivors claim tokens in score order; a survivor overlapping earlier
    claims keeps its longest unclaimed run.  Gaps become filler spans.  While
    there are too many spans, the lowest-scoring one is merged into its left
    neighbour (the leftmost span merges right).  Truncated and filler spans
    are scored from ``field`` when given; a merged span carries the sum of its
    parts' scores, so merges spread out instead of snowballing.
    """
    if max_spans < 1:
        raise ConfigError("max_spans must be >= 1")
    lo, hi = block_range
    n = hi - lo + 1
    ranked = _order([c for c in kept if c.end >= lo and c.start <= hi])
    a = np.array([max(c.start, lo) - lo for c in ranked], dtype=np.int64)
    b = np.array([min(c.end, hi) - lo for c in ranked], dtype=np.int64)
    rs, re = claim_runs(a, b, n)
    pieces: list[tuple[Span, bool]] = []
    for c, x, y in zip(ranked, rs.tolist(), re.tolist()):
        if x < 0:
            continue
        if (x + lo, y + lo) == (c.start, c.end):
            pieces.append((c, True))
        else:
            pieces.append((Span(x + lo, y + lo, _interval_score(field, x + lo, y + lo, c.score)), True))

    pieces.sort(key=lambda p: p[0].start)
    spans: list[Span] = []
    detected: list[bool] = []
    pos = lo
    for span, flag in pieces + [(Span(hi + 1, hi + 1), False)]:
        if span.start > pos:
            spans.append(Span(pos, span.start - 1, _interval_score(field, pos, span.start - 1, 0.0)))
            detected.append(False)
        if span.start <= hi:
            spans.append(span)
            detected.append(flag)
        pos = span.end + 1

    while len(spans) > max_spans:
        i = int(np.argmin([s.score for s in spans]))
        j = i - 1 if i > 0 else 1
        a, b = min(i, j), max(i, j)
        start, end = spans[a].start, spans[b].end
        merged = Span(start, end, spans[a].score + spans[b].score)
        spans[a:b + 1] = [merged]
        detected[a:b + 1] = [False]
    return SpanPartition(block_id, tuple(spans), tuple(detected))


def divide_block(
    field: TaScoreField,
    block_range: tuple[int, int],
    phi: float,
    max_spans: int,
    block_id: int = 0,
) -> SpanPartition:
    """Candidates, NMS and partition completion in one call."""
    starts, ends, scores = _candidate_arrays(field, block_range)
    keep = _nms_arrays(starts, ends, scores, phi) if scores.size else np.zeros(0, dtype=np.int64)
    kept = [Span(int(starts[i]), int(ends[i]), float(scores[i])) for i in keep]
    return complete_partition(kept, block_range, max_spans, field, block_id)


def divide_tile(tile: AttentionTile, theta_quantile: float, phi: float, max_spans: int, block_id: int = 0):
    """Divide a whole square tile, resolving theta as a quantile of its nonzero entries.

    Returns ``(partition, field)`` with spans in tile-local coordinates.
    """
    field = ta_field(tile, theta_from_quantile(tile, theta_quantile))
    return divide_block(field, (0, tile.cols - 1), phi, max_spans, block_id), field


# -- threshold tuning --------------------------------------------------------


@dataclass(frozen=True)
class LabeledBlock:
    """A square tile with ground-truth evidence intervals in tile coordinates."""

    tile: AttentionTile
    evidence: tuple[tuple[int, int], ...]
    layer: int = 0


def span_f1(blocks: Iterable[LabeledBlock], theta_quantile: float, phi: float, max_spans: int = 4) -> float:
    """Micro F1 of detected spans against evidence.

    A detected span (NMS survivor, fillers excluded) is a true positive when it
    overlaps some evidence interval by at least one token; an evidence interval
    is recalled when some detected span overlaps it.
    """
    n_pred = tp_pred = n_ev = hit_ev = 0
    for blk in blocks:
        part, _ = divide_tile(blk.tile, theta_quantile, phi, max_spans)
        found = [s for s, d in zip(part.spans, part.detected) if d]
        n_pred += len(found)
        tp_pred += sum(any(s.overlaps(lo, hi) for lo, hi in blk.evidence) for s in found)
        n_ev += len(blk.evidence)
        hit_ev += sum(any(s.overlaps(lo, hi) for s in found) for lo, hi in blk.evidence)
    if n_pred == 0 or n_ev == 0 or tp_pred == 0:
        return 0.0
    p, r = tp_pred / n_pred, hit_ev / n_ev
    return 2 * p * r / (p + r)


def tune_thresholds(
    labeled: Sequence[LabeledBlock],
    layer: int,
    trials: int,
    seed: int,
    max_spans: int = 4,
) -> tuple[float, float]:
    """Uniform random search for the (theta quantile, IoU threshold) pair with the best span F1."""
    blocks = [b for b in labeled if b.layer == layer]
    if not blocks:
        raise ConfigError(f"no labeled blocks for layer {layer}")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    best, best_f1 = None, -1.0
    for _ in range(trials):
        q = float(rng.uniform(*THETA_SEARCH))
        phi = float(rng.uniform(*PHI_SEARCH))
        f1 = span_f1(blocks, q, phi, max_spans)
        if f1 > best_f1:
            best, best_f1 = (q, phi), f1
    return best


# -- shipped presets ---------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPreset:
    theta_quantile: float = DEFAULT_THETA_QUANTILE
    iou_threshold: float = DEFAULT_IOU_THRESHOLD


def load_presets(name: str = "llama3_8b_instruct_262k") -> dict[int, ThresholdPreset]:
    """Per-layer thresholds shipped with the package, keyed by layer index."""
    try:
        text = resources.files("ltri.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown preset {name!r}") from exc
    return {int(k): ThresholdPreset(**v) for k, v in json.loads(text).items()}
