"""Tiered storage for evicted context blocks.

Each layer owns one :class:`ContextMemory`.  Evicted blocks keep their full
keys (and values, when the trace has them) in a cold store, while only the
span index vectors live in the hot tier used for retrieval scoring.  A small
LRU set models the blocks currently loaded back for attention.

Cold spill files hold up to 1024 blocks each.  Layout, little-endian::

    magic  b"LTRI"   4 bytes
    version  u32     = 1
    width    u32     floats per token (heads * head_dim)
    block    u32     tokens per block B
    then fixed-stride records:
        block_id u32, tokens u32, keys f32[B * width], values f32[B * width]

Short blocks are zero-padded; blocks without values store zeros.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InternalError
from .span_indexer import SpanIndex

SPILL_MAGIC = b"LTRI"
SPILL_VERSION = 1
SPILL_BLOCKS_PER_FILE = 1024
_SPILL_HEADER = struct.Struct("<4sIII")
_SPILL_RECORD = struct.Struct("<II")


@dataclass(frozen=True)
class StreamConfig:
    init_tokens: int = 128
    window: int = 4096
    block_size: int = 128
    chunk_size: int = 512
    gpu_cache_blocks: int = 32
    score_decay: float = 0.1
    spans_per_block: int = 4
    max_vectors: int = 12
    last_chunk: int = 32
    bytes_per_value: int = 4

    def __post_init__(self):
        for name in ("init_tokens", "window", "block_size", "chunk_size", "gpu_cache_blocks",
                     "spans_per_block", "max_vectors", "last_chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.score_decay < 1.0:
            raise ConfigError("score_decay must lie in [0, 1)")
        if self.bytes_per_value not in (2, 4):
            raise ConfigError("bytes_per_value must be 2 or 4")
        if self.window < self.block_size:
            raise ConfigError("window must hold at least one block")

    @property
    def dtype(self):
        return np.float16 if self.bytes_per_value == 2 else np.float32


@dataclass(frozen=True)
class BlockRecord:
    block_id: int
    start: int
    stop: int  # exclusive
    span_indexes: tuple[SpanIndex, ...]
    layer: int = 0
    needle: tuple[int, int] | None = None

    @property
    def tokens(self) -> int:
        return self.stop - self.start

    def hot_bytes(self) -> int:
        return sum(ix.vectors.nbytes for ix in self.span_indexes)


@dataclass(frozen=True)
class TierAccounting:
    hot_bytes: int
    cold_bytes: int
    blocks_resident_hot: int
    tokens_evicted: int
    compression_ratio: float
    cache_hits: int = 0
    cache_misses: int = 0

    def as_dict(self) -> dict:
        ratio = self.compression_ratio
        return {
            "hot_bytes": self.hot_bytes,
            "cold_bytes": self.cold_bytes,
            "blocks_resident_hot": self.blocks_resident_hot,
            "tokens_evicted": self.tokens_evicted,
            "compression_ratio": None if math.isinf(ratio) else round(ratio, 6),
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
        }


def decay_scores(running: np.ndarray, new: np.ndarray, decay: float) -> np.ndarray:
    """Running block score update: ``score * (1 - decay) + new``."""
    return running * (1.0 - decay) + new


class LRUBlockCache:
    """Residency set of block ids with hit/miss counters."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._order: OrderedDict[int, None] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def touch(self, block_id: int) -> bool:
        if block_id in self._order:
            self._order.move_to_end(block_id)
            self.hits += 1
            return True
        self.misses += 1
        self._order[block_id] = None
        if len(self._order) > self.capacity:
            self._order.popitem(last=False)
        return False

    def __contains__(self, block_id: int) -> bool:
        return block_id in self._order

    def resident(self) -> list[int]:
        return list(self._order)


class _SpillStore:
    def __init__(self, directory: Path, width: int, block_size: int, tag: str):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.width = width
        self.block = block_size
        self.tag = tag
        self.stride = _SPILL_RECORD.size + 2 * block_size * width * 4
        self.slots: dict[int, tuple[int, int]] = {}
        self._count = 0

    def _path(self, file_no: int) -> Path:
        return self.dir / f"{self.tag}_{file_no:05d}.ltri"

    def put(self, block_id: int, keys: np.ndarray, values: np.ndarray | None) -> None:
        file_no, slot = divmod(self._count, SPILL_BLOCKS_PER_FILE)
        path = self._path(file_no)
        n = keys.shape[0]
        buf = np.zeros((2, self.block, self.width), dtype="<f4")
        buf[0, :n] = keys.reshape(n, -1)
        if values is not None:
            buf[1, :n] = values.reshape(n, -1)
        with open(path, "ab") as fh:
            if slot == 0:
                fh.write(_SPILL_HEADER.pack(SPILL_MAGIC, SPILL_VERSION, self.width, self.block))
            fh.write(_SPILL_RECORD.pack(block_id, n))
            fh.write(buf.tobytes())
        self.slots[block_id] = (file_no, slot)
        self._count += 1

    def get(self, block_id: int) -> tuple[np.ndarray, np.ndarray]:
        file_no, slot = self.slots[block_id]
        with open(self._path(file_no), "rb") as fh:
            fh.seek(_SPILL_HEADER.size + slot * self.stride)
            bid, n = _SPILL_RECORD.unpack(fh.read(_SPILL_RECORD.size))
            data = np.frombuffer(fh.read(self.stride - _SPILL_RECORD.size), dtype="<f4")
        if bid != block_id:
            raise InternalError(f"spill slot holds block {bid}, expected {block_id}")
        data = data.reshape(2, self.block, self.width)
        return data[0, :n].copy(), data[1, :n].copy()


def read_spill_header(path) -> dict:
    with open(path, "rb") as fh:
        magic, version, width, block = _SPILL_HEADER.unpack(fh.read(_SPILL_HEADER.size))
    if magic != SPILL_MAGIC:
        raise ValueError(f"{path} is not a spill file")
    return {"version": version, "width": width, "block": block}


class ContextMemory:
    """One layer's evicted blocks: hot span indexes plus cold full keys."""

    def __init__(
        self,
        layer: int,
        heads: int,
        head_dim: int,
        config: StreamConfig,
        indexed: bool = True,
        spill_dir: str | Path | None = None,
    ):
        self.layer = layer
        self.heads = heads
        self.head_dim = head_dim
        self.config = config
        self.indexed = indexed
        self.records: dict[int, BlockRecord] = {}
        self.order: list[int] = []
        self.cache = LRUBlockCache(config.gpu_cache_blocks)
        self._cold: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}
        self._spill = (
            _SpillStore(spill_dir, heads * head_dim, config.block_size, f"layer{layer:03d}")
            if spill_dir is not None else None
        )
        self._hot_bytes = 0
        self._hot_blocks = 0
        self._cold_bytes = 0
        self._tokens = 0
        self._sums: np.ndarray | None = None  # grown by doubling
        self._owner: np.ndarray | None = None
        self._n_spans = 0
        self.running = np.zeros(0)

    def __len__(self) -> int:
        return len(self.order)

    def __contains__(self, block_id: int) -> bool:
        return block_id in self.records

    def evict_block(
        self,
        block_id: int,
        start: int,
        keys: np.ndarray,
        span_indexes: Sequence[SpanIndex] = (),
        values: np.ndarray | None = None,
        needle: tuple[int, int] | None = None,
    ) -> BlockRecord:
        """Move a block's keys to the cold tier and register its span indexes in the hot tier."""
        if block_id in self.records:
            raise InternalError(f"block {block_id} already evicted from layer {self.layer}")
        if self.indexed and not span_indexes:
            raise InternalError(f"block {block_id} evicted without span index")
        dtype = self.config.dtype
        indexes = tuple(
            SpanIndex(ix.span, np.ascontiguousarray(ix.vectors, dtype=dtype), ix.source_tokens, ix.rv, ix.ratio)
            for ix in span_indexes
        )
        keys = np.ascontiguousarray(keys, dtype=dtype)
        values = None if values is None else np.ascontiguousarray(values, dtype=dtype)
        record = BlockRecord(block_id, start, start + keys.shape[0], indexes, self.layer, needle)
        if self._spill is not None:
            self._spill.put(block_id, keys, values)
        else:
            self._cold[block_id] = (keys, values)
        self.records[block_id] = record
        self.order.append(block_id)
        self._hot_bytes += record.hot_bytes()
        self._hot_blocks += bool(indexes)
        self._cold_bytes += keys.nbytes + (0 if values is None else values.nbytes)
        self._tokens += record.tokens
        for ix in indexes:
            self._push_sum(ix.vectors.astype(np.float64).sum(axis=0), len(self.order) - 1)
        self.running = np.append(self.running, 0.0)
        return record

    def _push_sum(self, vec: np.ndarray, owner: int) -> None:
        if self._sums is None or self._n_spans == self._sums.shape[0]:
            cap = max(64, 2 * self._n_spans)
            sums = np.zeros((cap, vec.size))
            owners = np.zeros(cap, dtype=np.int64)
            if self._sums is not None:
                sums[:self._n_spans] = self._sums[:self._n_spans]
                owners[:self._n_spans] = self._owner[:self._n_spans]
            self._sums, self._owner = sums, owners
        self._sums[self._n_spans] = vec
        self._owner[self._n_spans] = owner
        self._n_spans += 1

    def span_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """``(summed index vector per span, position of owning block in eviction order)``."""
        if self._sums is None:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return self._sums[:self._n_spans], self._owner[:self._n_spans]

    def fetch_blocks(self, ids: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Cold keys/values for ``ids``; loads go through the LRU residency set."""
        out = []
        for bid in ids:
            if bid not in self.records:
                raise IndexError(f"block {bid} not in layer {self.layer} memory")
            self.cache.touch(bid)
            if self._spill is not None:
                keys, values = self._spill.get(bid)
                out.append((keys, values))
            else:
                out.append(self._cold[bid])
        return out

    @property
    def hot_bytes(self) -> int:
        """Streaming hot-tier byte counter."""
        return self._hot_bytes

    def recompute_hot_bytes(self) -> int:
        return sum(r.hot_bytes() for r in self.records.values())

    def accounting(self) -> TierAccounting:
        full = self._tokens * self.heads * self.head_dim * self.config.bytes_per_value
        ratio = full / self._hot_bytes if self._hot_bytes else math.inf
        return TierAccounting(
            self._hot_bytes, self._cold_bytes, self._hot_blocks,
            self._tokens, ratio, self.cache.hits, self.cache.misses,
        )


def compression_bound(block_size: int, heads: int, max_vectors: int, retrieval_heads: int) -> float:
    """Relaxed lower bound on evicted-KV bytes over index bytes: ``B*H / (M*h)``."""
    return block_size * heads / (max_vectors * retrieval_heads)
