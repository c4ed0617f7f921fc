"""Block retrieval: span similarity, per-layer ranking, head-weighted voting.

Span similarity is the sum of all pairwise dot products between a query
span's vectors and a memory span's vectors, which equals the dot product of
the two vector sums.  A block scores the best similarity over its spans and
the current query spans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .context_memory import ContextMemory, decay_scores
from .errors import ConfigError, InvalidTrace

Ranked = list[tuple[int, float]]


@dataclass(frozen=True)
class RetrievalHead:
    layer: int
    head: int
    score: float


# (layer, head, score) triples adopted for Llama-3-8B-Instruct-262K
SHIPPED_RETRIEVAL_HEADS = (
    RetrievalHead(5, 8, 0.21), RetrievalHead(8, 1, 0.49), RetrievalHead(10, 14, 0.45),
    RetrievalHead(13, 6, 0.15), RetrievalHead(14, 18, 0.15), RetrievalHead(15, 30, 0.90),
    RetrievalHead(16, 1, 0.50), RetrievalHead(17, 29, 0.12), RetrievalHead(19, 3, 0.30),
    RetrievalHead(20, 14, 0.44), RetrievalHead(22, 14, 0.33), RetrievalHead(24, 27, 0.46),
    RetrievalHead(26, 15, 0.14), RetrievalHead(27, 7, 0.30),
)


def adopt_heads(candidates: Sequence[RetrievalHead], min_score: float = 0.1) -> dict[int, RetrievalHead]:
    """Keep heads scoring above ``min_score``, at most the best one per layer."""
    adopted: dict[int, RetrievalHead] = {}
    for h in candidates:
        if h.score <= min_score:
            continue
        cur = adopted.get(h.layer)
        if cur is None or h.score > cur.score:
            adopted[h.layer] = h
    return dict(sorted(adopted.items()))


def span_similarity(queries: np.ndarray, keys: np.ndarray) -> float:
    """Sum of every query-key dot product between two vector sets."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    if k.ndim == 1:
        k = k[None]
    if q.shape[1] != k.shape[1]:
        raise InvalidTrace(f"vector dimension mismatch: {q.shape[1]} vs {k.shape[1]}")
    return float(q.sum(axis=0) @ k.sum(axis=0))


def rank_blocks(
    query_sets: Sequence[np.ndarray],
    memory: ContextMemory,
    decay: float | None = None,
) -> Ranked:
    """Rank every block in ``memory`` by its best span similarity to any query set.

    With ``decay`` set, the memory's running block scores are decayed and the
    fresh similarities added before ranking (the running scores are updated).
    Ties go to the lower block id.
    """
    if not len(memory):
        return []
    sums, owner = memory.span_matrix()
    q = np.array([np.asarray(s, dtype=np.float64).sum(axis=0) if np.ndim(s) == 2 else np.asarray(s, dtype=np.float64)
                  for s in query_sets])
    if q.ndim != 2 or q.shape[1] != sums.shape[1]:
        raise InvalidTrace(f"query dimension {q.shape[1]} does not match index dimension {sums.shape[1]}")
    per_span = (sums @ q.T).max(axis=1)
    starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
    fresh = np.maximum.reduceat(per_span, starts)
    if decay is not None:
        memory.running = decay_scores(memory.running, fresh, decay)
        scores = memory.running
    else:
        scores = fresh
    ids = np.asarray(memory.order)
    order = np.lexsort((ids, -scores))
    return list(zip(ids[order].tolist(), np.asarray(scores, dtype=np.float64)[order].tolist()))


def vote(per_layer: Mapping[int, Ranked], weights: Mapping[int, float], k: int) -> Ranked:
    """Each layer adds its weight to every block in its own top-``k``; keep the ``k`` heaviest."""
    tally: dict[int, float] = {}
    for layer, ranked in per_layer.items():
        w = weights[layer]
        for bid, _ in ranked[:k]:
            tally[bid] = tally.get(bid, 0.0) + w
    return sorted(tally.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def inject_evidence(selected: Ranked, needle_blocks: Sequence[int], k: int) -> Ranked:
    """Force needle blocks into a selection, displacing the lowest-weight others beyond ``k``."""
    if not needle_blocks:
        raise ConfigError("evidence injection requested but no needle blocks are annotated")
    needles = set(needle_blocks)
    present = {bid for bid, _ in selected}
    merged = list(selected) + [(bid, 0.0) for bid in sorted(needles - present)]
    keep = [e for e in merged if e[0] in needles]
    others = sorted((e for e in merged if e[0] not in needles), key=lambda e: (-e[1], e[0]))
    keep += others[: max(0, k - len(keep))]
    return sorted(keep, key=lambda e: (-e[1], e[0]))


@dataclass
class RetrievalResult:
    step: int
    per_layer: dict[int, Ranked] = field(default_factory=dict)  # each indexing layer's top-K
    used: dict[int, tuple[int, ...]] = field(default_factory=dict)  # blocks each layer attends to
    voted: Ranked | None = None
    persistent: bool = False

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "per_layer": {str(l): [[b, round(s, 6)] for b, s in r] for l, r in self.per_layer.items()},
            "used": {str(l): list(b) for l, b in self.used.items()},
            "voted": None if self.voted is None else [[b, round(w, 6)] for b, w in self.voted],
            "persistent": self.persistent,
        }

    def voted_json(self) -> str:
        return json.dumps(self.as_dict()["voted"])


class Retriever:
    """Per-step retrieval across layers with the head / voting / persistence switches."""

    def __init__(
        self,
        layers: int,
        heads: Mapping[int, RetrievalHead] | None,
        top_k: int = 16,
        use_heads: bool = True,
        voting: bool = True,
        persistent: bool = True,
        inject: bool = False,
        decay: float | None = 0.1,
        progressive: bool = False,
    ):
        if top_k < 1:
            raise ConfigError("top_k must be >= 1")
        self.layers = layers
        self.heads = dict(heads or {})
        self.top_k = top_k
        self.use_heads = use_heads
        self.voting = voting
        self.persistent = persistent
        self.inject = inject
        self.decay = decay
        self.progressive = progressive
        if use_heads:
            if not self.heads:
                raise ConfigError("retrieval heads enabled but none adopted")
            bad = [l for l in self.heads if not 0 <= l < layers]
            if bad:
                raise ConfigError(f"retrieval heads reference missing layers {bad}")
            self.indexing_layers = sorted(self.heads)
        else:
            self.indexing_layers = list(range(layers))
        self.stored: RetrievalResult | None = None

    def weight(self, layer: int) -> float:
        return self.heads[layer].score if self.use_heads else 1.0

    def _source_layer(self, layer: int) -> int:
        earlier = [l for l in self.indexing_layers if l <= layer]
        return earlier[-1] if earlier else self.indexing_layers[0]

    def retrieve(
        self,
        step: int,
        queries: Mapping[int, Sequence[np.ndarray]],
        memories: Mapping[int, ContextMemory],
        needle_blocks: Sequence[int] = (),
    ) -> RetrievalResult:
        """Rank, vote and (optionally) inject for one engine step."""
        k = self.top_k
        per_layer = {l: rank_blocks(queries[l], memories[l], self.decay)[:k] for l in self.indexing_layers}
        result = RetrievalResult(step, per_layer)
        weights = {l: self.weight(l) for l in self.indexing_layers}
        if self.voting:
            result.voted = vote(per_layer, weights, k)
            if self.inject and needle_blocks:
                result.voted = inject_evidence(result.voted, needle_blocks, k)
            for layer in range(self.layers):
                chosen = result.voted
                if self.progressive:
                    src = [l for l in self.indexing_layers if l <= layer] or self.indexing_layers[:1]
                    chosen = vote({l: per_layer[l] for l in src}, weights, k)
                    if self.inject and needle_blocks:
                        chosen = inject_evidence(chosen, needle_blocks, k)
                result.used[layer] = tuple(b for b, _ in chosen)
        else:
            own = {}
            for l in self.indexing_layers:
                sel = per_layer[l]
                if self.inject and needle_blocks:
                    sel = inject_evidence(sel, needle_blocks, k)
                own[l] = tuple(b for b, _ in sel)
            for layer in range(self.layers):
                result.used[layer] = own[self._source_layer(layer)]
        return result

    def persist(self, result: RetrievalResult) -> None:
        """Freeze the final prefill result for the whole decode phase."""
        self.stored = result

    def decode_retrieve(
        self,
        step: int,
        queries: Mapping[int, Sequence[np.ndarray]],
        memories: Mapping[int, ContextMemory],
        needle_blocks: Sequence[int] = (),
    ) -> RetrievalResult:
        if self.persistent and self.stored is not None:
            s = self.stored
            return RetrievalResult(step, dict(s.per_layer), dict(s.used), s.voted, True)
        return self.retrieve(step, queries, memories, needle_blocks)
