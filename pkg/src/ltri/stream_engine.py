"""Trace-driven streaming engine.

Each step takes one trace segment and

1. evicts whole blocks that fell out of the local window, dividing each into
   spans and storing its span index (hot) and full keys (cold) per layer;
2. divides the incoming segment, builds query span indexes and retrieves
   top-K evicted blocks per layer, then votes;
3. assembles the attended set (initial tokens, retrieved blocks, window,
   current segment) and folds the segment's attention into the token votes.

Only the incoming segment's diagonal tiles and its column mass over the
window are needed, so the "local attention map" is kept as per-token vote
totals plus the divisions of blocks still in the window.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .context_memory import ContextMemory, StreamConfig, TierAccounting
from .errors import ConfigError, InvalidTrace, StateError
from .retriever import SHIPPED_RETRIEVAL_HEADS, RetrievalHead, RetrievalResult, Retriever, adopt_heads
from .span_divider import (
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_THETA_QUANTILE,
    SpanPartition,
    ThresholdPreset,
    divide_tile,
    load_presets,
)
from .span_indexer import RATIO_MODES, SpanIndex, dynamic_index, static_index
from .trace_io import Segment, Trace, TraceHeader
from .tri_attention import AttentionTile, TaScoreField

INDEX_POLICIES = ("dynamic", "static")


@dataclass(frozen=True)
class EngineConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    top_k: int = 16
    lam: float = 3.0
    lam_early: float = 20.0
    early_layers: int = 4
    lambdas: dict[int, float] = field(default_factory=dict)  # per-layer overrides, e.g. from calibration
    min_vectors: int = 1
    ratio_mode: str = "row"
    index_policy: str = "dynamic"
    static_vectors: int = 4
    threshold_preset: str | None = None
    theta_quantile: float = DEFAULT_THETA_QUANTILE
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    retrieval_heads: tuple[tuple[int, int, float], ...] | None = None  # None -> the shipped 14 heads
    use_heads: bool = True
    voting: bool = True
    persistent: bool = True
    inject_evidence: bool = False
    progressive: bool = False

    def __post_init__(self):
        if self.ratio_mode not in RATIO_MODES:
            raise ConfigError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.index_policy not in INDEX_POLICIES:
            raise ConfigError(f"index_policy must be one of {INDEX_POLICIES}")
        if self.top_k < 1 or self.min_vectors < 1:
            raise ConfigError("top_k and min_vectors must be positive")
        if self.lam <= 0 or self.lam_early <= 0 or any(v <= 0 for v in self.lambdas.values()):
            raise ConfigError("lambda values must be positive")
        if self.stream.max_vectors < self.stream.spans_per_block * self.min_vectors:
            raise ConfigError("max_vectors cannot give every span its minimum")

    def lambda_for(self, layer: int) -> float:
        if layer in self.lambdas:
            return self.lambdas[layer]
        return self.lam_early if layer < self.early_layers else self.lam

    def heads(self) -> list[RetrievalHead]:
        if self.retrieval_heads is None:
            return list(SHIPPED_RETRIEVAL_HEADS)
        return [RetrievalHead(int(l), int(h), float(s)) for l, h, s in self.retrieval_heads]

    def thresholds(self, layer: int) -> ThresholdPreset:
        if self.threshold_preset:
            preset = load_presets(self.threshold_preset)
            if layer in preset:
                return preset[layer]
        return ThresholdPreset(self.theta_quantile, self.iou_threshold)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = {str(k): v for k, v in self.lambdas.items()}
        if self.retrieval_heads is not None:
            d["retrieval_heads"] = [list(h) for h in self.retrieval_heads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "stream" in d:
            s = d["stream"]
            bad = set(s) - set(StreamConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown stream keys {sorted(bad)}")
            d["stream"] = StreamConfig(**s)
        if "lambdas" in d:
            d["lambdas"] = {int(k): float(v) for k, v in d["lambdas"].items()}
        if d.get("retrieval_heads") is not None:
            d["retrieval_heads"] = tuple(tuple(h) for h in d["retrieval_heads"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "EngineConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def with_flags(self, **kw) -> "EngineConfig":
        return replace(self, **kw)


def _round(x: float) -> float:
    return round(float(x), 6)


@dataclass
class StepReport:
    step: int
    kind: str
    start: int
    length: int
    evicted: list[int]
    retrieval: RetrievalResult | None
    recall: dict[int, bool]
    attended_tokens: int
    local_width: int
    hot_bytes: int

    def as_dict(self) -> dict:
        ret = self.retrieval.as_dict() if self.retrieval is not None else None
        layers = sorted(self.recall)
        return {
            "step": self.step,
            "kind": self.kind,
            "start": self.start,
            "length": self.length,
            "evicted": self.evicted,
            "layers": [
                {
                    "layer": l,
                    "topk": [] if ret is None else [
                        {"block": b, "score": s} for b, s in ret["per_layer"].get(str(l), [])
                    ],
                    "used": [] if ret is None else ret["used"].get(str(l), []),
                    "needle_recalled": self.recall[l],
                }
                for l in layers
            ],
            "voted": None if ret is None else ret["voted"],
            "persistent": bool(ret and ret["persistent"]),
            "attended_tokens": self.attended_tokens,
            "local_width": self.local_width,
            "hot_bytes": self.hot_bytes,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


@dataclass
class RunSummary:
    tokens: int
    blocks: int
    layers: list[int]
    recall_matrix: list[list[bool]]  # layers x decode steps
    aggregate_recall: float
    accounting: dict
    config_echo: dict

    def as_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "blocks": self.blocks,
            "layers": self.layers,
            "recall_matrix": self.recall_matrix,
            "aggregate_recall": _round(self.aggregate_recall),
            "accounting": self.accounting,
            "config_echo": self.config_echo,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


class StreamState:
    """Mutable bookkeeping of one stream."""

    def __init__(self, header: TraceHeader, config: EngineConfig):
        self.phase = "prefill"
        self.position = 0
        self.local_start = config.stream.init_tokens
        self.step = 0
        self.evicted_blocks: list[int] = []
        n = header.token_count
        self.votes: dict[int, np.ndarray] = {}
        self.vote_len = n
        self.keys: dict[int, dict[int, list[np.ndarray]]] = {l: {} for l in range(header.layers)}
        self.tiles: dict[int, dict[int, list[tuple[int, np.ndarray]]]] = {l: {} for l in range(header.layers)}
        self.divisions: dict[int, dict[int, tuple[SpanPartition, TaScoreField]]] = {l: {} for l in range(header.layers)}


class StreamEngine:
    def __init__(
        self,
        header: TraceHeader,
        config: EngineConfig,
        needles: Sequence[tuple[int, int]] = (),
        spill_dir: str | Path | None = None,
    ):
        sc = config.stream
        if header.block_size != sc.block_size or header.init_tokens != sc.init_tokens:
            raise InvalidTrace(
                f"trace block/init ({header.block_size}/{header.init_tokens}) differs from "
                f"config ({sc.block_size}/{sc.init_tokens})"
            )
        if sc.window > header.window:
            raise InvalidTrace(f"trace column mass covers {header.window} tokens, config window is {sc.window}")
        if config.inject_evidence and not needles:
            raise ConfigError("evidence injection requested but the trace has no needle annotations")
        self.header = header
        self.config = config
        self.needles = tuple(tuple(n) for n in needles)
        adopted = adopt_heads([h for h in config.heads() if h.layer < header.layers]) if config.use_heads else {}
        for h in adopted.values():
            if h.head >= header.heads:
                raise ConfigError(f"retrieval head {h} outside the trace's {header.heads} heads")
        self.retriever = Retriever(
            header.layers, adopted, config.top_k, config.use_heads, config.voting,
            config.persistent, config.inject_evidence, sc.score_decay, config.progressive,
        )
        self.indexing = list(self.retriever.indexing_layers)
        self.memories = {
            l: ContextMemory(
                l, header.heads, header.head_dim, sc, indexed=l in self.indexing,
                spill_dir=None if spill_dir is None else Path(spill_dir),
            )
            for l in range(header.layers)
        }
        self.state = StreamState(header, config)
        for l in self.indexing:
            self.state.votes[l] = np.zeros(header.token_count, dtype=np.float64)
        self.needle_blocks = sorted({b for lo, hi in self.needles for b in self._blocks_of(lo, hi)})
        self.reports: list[StepReport] = []
        # Optional dict shared by engines fed the same segment in lockstep; the owner clears it.
        self.division_memo: dict | None = None

    # -- geometry -------------------------------------------------------------

    def block_of(self, pos: int) -> int:
        sc = self.config.stream
        return -1 if pos < sc.init_tokens else (pos - sc.init_tokens) // sc.block_size

    def block_start(self, bid: int) -> int:
        sc = self.config.stream
        return sc.init_tokens + bid * sc.block_size

    def _blocks_of(self, lo: int, hi: int) -> list[int]:
        return [b for b in range(self.block_of(lo), self.block_of(hi) + 1) if b >= 0]

    def _vectors(self, layer: int, x: np.ndarray) -> np.ndarray:
        """Per-token retrieval vectors: the retrieval head's slice, or all heads concatenated."""
        if self.config.use_heads:
            return x[:, self.retriever.heads[layer].head, :]
        return x.reshape(x.shape[0], -1)

    # -- span indexing -----------------------------------------------------------

    def _memo(self, key, fn):
        memo = self.division_memo
        if memo is None:
            return fn()
        if key not in memo:
            memo[key] = fn()
        return memo[key]

    def _colsum(self, layer: int, lo: int, piece: np.ndarray) -> np.ndarray:
        """Attention each key column of a diagonal piece receives, summed over heads and rows."""
        return self._memo(("colsum", layer, lo, piece.shape[-1]),
                          lambda: piece.sum(axis=(0, 1), dtype=np.float64))

    def _divide(self, layer: int, tile: np.ndarray, start: int, bid: int, tag: str = "piece"):
        th = self.config.thresholds(layer)
        n_s = self.config.stream.spans_per_block
        key = (tag, layer, start, tile.shape[-1], th.theta_quantile, th.iou_threshold, n_s)
        return self._memo(key, lambda: divide_tile(
            AttentionTile(tile, layer, start), th.theta_quantile, th.iou_threshold, n_s, bid))

    def _index_key(self, layer: int) -> tuple:
        c = self.config
        head = self.retriever.heads[layer].head if c.use_heads else None
        return (c.thresholds(layer), c.stream.spans_per_block, c.stream.max_vectors, c.index_policy,
                c.static_vectors, c.lambda_for(layer), c.min_vectors, c.ratio_mode, head)

    def _index(self, layer, part, fld, vectors, votes) -> list[SpanIndex]:
        sc = self.config.stream
        if self.config.index_policy == "static":
            return static_index(part, votes, vectors, self.config.static_vectors, sc.spans_per_block)
        return dynamic_index(
            fld, part, vectors, votes, self.config.lambda_for(layer), self.config.min_vectors,
            sc.max_vectors, sc.max_vectors, self.config.ratio_mode,
        )

    def _block_tile(self, layer: int, bid: int, n: int) -> np.ndarray:
        tile = np.zeros((self.header.heads, n, n), dtype=np.float32)
        base = self.block_start(bid)
        for lo, piece in self.state.tiles[layer].pop(bid, []):
            o = lo - base
            tile[:, o:o + piece.shape[1], o:o + piece.shape[2]] = piece
        return tile

    # -- step 1 -------------------------------------------------------------------

    def _evict(self) -> list[int]:
        st, sc = self.state, self.config.stream
        out = []
        while st.position - st.local_start > sc.window and st.local_start + sc.block_size <= st.position:
            bid = self.block_of(st.local_start)
            start = st.local_start
            n = sc.block_size
            overlap = next(((lo, hi) for lo, hi in self.needles if lo <= start + n - 1 and start <= hi), None)
            for layer in range(self.header.layers):
                keys = np.concatenate(st.keys[layer].pop(bid), axis=0)
                indexes: list[SpanIndex] = []
                if layer in self.indexing:
                    if bid in st.divisions[layer]:
                        part, fld = st.divisions[layer].pop(bid)
                    else:
                        part, fld = self._divide(layer, self._block_tile(layer, bid, n), start, bid, "block")
                    votes = st.votes[layer][start:start + n]

                    def build(part=part, fld=fld, keys=keys, votes=votes, layer=layer):
                        return [SpanIndex(ix.span.shifted(start), ix.vectors,
                                          tuple(t + start for t in ix.source_tokens), ix.rv, ix.ratio)
                                for ix in self._index(layer, part, fld, self._vectors(layer, keys), votes)]

                    indexes = self._memo(("evict", layer, bid) + self._index_key(layer), build)
                st.tiles[layer].pop(bid, None)
                self.memories[layer].evict_block(bid, start, keys.reshape(n, -1), indexes, None, overlap)
            st.local_start += n
            st.evicted_blocks.append(bid)
            out.append(bid)
        return out

    # -- step 2 -------------------------------------------------------------------

    def _query_sets(self, seg: Segment) -> dict[int, list[np.ndarray]]:
        st, sc = self.state, self.config.stream
        out: dict[int, list[np.ndarray]] = {}
        for layer in self.indexing:
            queries = seg.queries(layer)
            pieces = seg.pieces(layer)
            sets = []
            for (lo, hi), piece in zip(seg.bounds(), pieces):
                bid = self.block_of(lo)
                full = bid >= 0 and lo == self.block_start(bid) and hi - lo == sc.block_size
                part, fld = self._divide(layer, piece, lo, bid)
                if full:
                    st.divisions[layer][bid] = (part, fld)

                def build(piece=piece, part=part, fld=fld, lo=lo, hi=hi, layer=layer, queries=queries):
                    votes = self._colsum(layer, lo, piece)
                    qv = self._vectors(layer, queries[lo - seg.start:hi - seg.start])
                    return [ix.vectors for ix in self._index(layer, part, fld, qv, votes)]

                sets.extend(self._memo(("query", layer, lo, hi) + self._index_key(layer), build))
            out[layer] = sets
        return out

    def _retrieve(self, seg: Segment) -> RetrievalResult | None:
        if not self.state.evicted_blocks:
            self._query_sets(seg)
            return None
        evicted = set(self.state.evicted_blocks)
        needles = [b for b in self.needle_blocks if b in evicted]
        if self.state.phase == "decode" and self.config.persistent and self.retriever.stored is not None:
            self._query_sets(seg)
            return self.retriever.decode_retrieve(self.state.step, {}, self.memories, needles)
        queries = self._query_sets(seg)
        return self.retriever.retrieve(self.state.step, queries, self.memories, needles)

    # -- step 3 -------------------------------------------------------------------

    def _assemble(self, seg: Segment, result: RetrievalResult | None) -> int:
        st, sc = self.state, self.config.stream
        attended = 0
        for layer in range(self.header.layers):
            retrieved = 0
            if result is not None:
                ids = result.used.get(layer, ())
                retrieved = sum(k.shape[0] for k, _ in self.memories[layer].fetch_blocks(ids))
            local = st.position - st.local_start
            attended = max(attended, min(st.position, sc.init_tokens) + retrieved + max(0, local) + seg.length)
        return attended

    def _append(self, seg: Segment) -> None:
        st = self.state
        for layer in range(self.header.layers):
            keys = seg.keys(layer)
            for lo, hi in seg.bounds():
                st.keys[layer].setdefault(self.block_of(lo), []).append(keys[lo - seg.start:hi - seg.start])
            if layer in self.indexing:
                v = st.votes[layer]
                v[seg.colmass_start:seg.stop] += seg.colmass(layer).sum(axis=0, dtype=np.float64)
                for (lo, hi), piece in zip(seg.bounds(), seg.pieces(layer)):
                    v[lo:hi] += self._colsum(layer, lo, piece)
                    bid = self.block_of(lo)
                    if bid >= 0 and bid not in st.divisions[layer]:
                        st.tiles[layer].setdefault(bid, []).append((lo, piece))
        # init tokens never leave; drop their key buffers
        for layer in range(self.header.layers):
            st.keys[layer].pop(-1, None)
            st.tiles[layer].pop(-1, None)
        st.position = seg.stop

    def _recall(self, result: RetrievalResult | None) -> dict[int, bool]:
        evicted = set(self.state.evicted_blocks)
        needed = [b for b in self.needle_blocks if b in evicted]
        out = {}
        for layer in self.indexing:
            used = set(result.used.get(layer, ())) if result is not None else set()
            out[layer] = all(b in used for b in needed)
        return out

    # -- public operations -------------------------------------------------------

    def step(self, seg: Segment) -> StepReport:
        st = self.state
        if seg.start != st.position:
            raise InvalidTrace(f"segment starts at {seg.start}, stream is at {st.position}")
        if seg.length < 1:
            raise InvalidTrace("empty segment")
        if st.phase == "prefill" and seg.length > self.config.stream.chunk_size:
            raise InvalidTrace(f"segment of {seg.length} tokens exceeds chunk size")
        if seg.stop > self.header.token_count:
            raise InvalidTrace("segment runs past the trace's token count")
        evicted = self._evict()
        result = self._retrieve(seg)
        attended = self._assemble(seg, result)
        self._append(seg)
        width = st.position - st.local_start
        hot = sum(m.hot_bytes for m in self.memories.values())
        report = StepReport(st.step, seg.kind, seg.start, seg.length, evicted, result,
                            self._recall(result), attended, width, hot)
        st.step += 1
        self.reports.append(report)
        return report

    def finish_prefill(self, seg: Segment) -> StepReport:
        if self.state.phase != "prefill":
            raise StateError("prefill already finished")
        if seg.length < 1:
            raise ConfigError("last prefill chunk is empty")
        if seg.length > self.config.stream.last_chunk:
            raise ConfigError(f"last prefill chunk of {seg.length} tokens exceeds {self.config.stream.last_chunk}")
        report = self.step(seg)
        if self.config.persistent and report.retrieval is not None:
            self.retriever.persist(report.retrieval)
        self.state.phase = "decode"
        return report

    def decode_step(self, seg: Segment) -> StepReport:
        if self.state.phase != "decode":
            raise StateError("decode_step before finish_prefill")
        if seg.length != 1:
            raise InvalidTrace("decode segments hold exactly one token")
        return self.step(seg)

    def feed(self, seg: Segment) -> StepReport:
        if seg.kind == "prefill":
            if self.state.phase != "prefill":
                raise InvalidTrace("prefill segment after the decode phase began")
            return self.step(seg)
        if seg.kind == "final":
            return self.finish_prefill(seg)
        return self.decode_step(seg)

    def accounting(self) -> dict:
        per = {l: m.accounting() for l, m in self.memories.items()}
        indexed = [per[l] for l in self.indexing]
        hot = sum(a.hot_bytes for a in per.values())
        tokens = sum(a.tokens_evicted for a in indexed)
        full = tokens * self.header.heads * self.header.head_dim * self.config.stream.bytes_per_value
        return {
            "hot_bytes": hot,
            "cold_bytes": sum(a.cold_bytes for a in per.values()),
            "tokens_evicted": per[0].tokens_evicted if per else 0,
            "compression_ratio": None if hot == 0 else _round(full / hot),
            "cache_hits": sum(a.cache_hits for a in per.values()),
            "cache_misses": sum(a.cache_misses for a in per.values()),
            "per_layer": {str(l): per[l].as_dict() for l in sorted(per)},
        }

    def summary(self) -> RunSummary:
        decode = [r for r in self.reports if r.kind == "decode"]
        matrix = [[r.recall[l] for r in decode] for l in self.indexing]
        cells = [c for row in matrix for c in row]
        agg = sum(cells) / len(cells) if cells else float("nan")
        return RunSummary(
            self.state.position, len(self.state.evicted_blocks), list(self.indexing), matrix, agg,
            self.accounting(), self.config.to_dict(),
        )


def run_stream(
    trace: Trace,
    config: EngineConfig,
    spill_dir: str | Path | None = None,
) -> tuple[StreamEngine, Iterator[StepReport]]:
    """Build an engine for ``trace``; the returned iterator drives it segment by segment."""
    engine = StreamEngine(trace.header, config, trace.needles, spill_dir)

    def _drive():
        for seg in trace:
            yield engine.feed(seg)

    return engine, _drive()
