"""Attention traces: the in-memory segment model and the binary file format.

A trace is an ordered list of segments (prefill chunks, the final prefill
chunk holding the question, then single decode tokens).  Per layer a segment
carries

* ``pieces``: the diagonal attention tiles of the segment, cut at block
  boundaries (``init_tokens + k * block_size``), each ``(H, n, n)``;
* ``colmass``: attention mass the segment's queries put on every column from
  ``colmass_start`` to the segment end, summed over query rows and excluding
  the cells already inside ``pieces``, shaped ``(H, cols)``;
* ``keys`` / ``queries``: ``(n_tokens, H, d)``.

File layout (little-endian, all floats f32)::

    header   "<4s10I": magic b"LTRI", version, layers, heads, d, block_size,
             token_count, window, init_tokens, segment_count, needle_count
    needles  needle_count x "<II"   (first, last) token, inclusive
    segments segment_count x "<IIIIQ"  start, length, kind, colmass_start, data offset
    data     per segment, per layer: pieces..., colmass, keys, queries

``kind`` is 0 prefill, 1 final prefill chunk, 2 decode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidTrace

MAGIC = b"LTRI"
VERSION = 1
KINDS = ("prefill", "final", "decode")
_HEADER = struct.Struct("<4s10I")
_NEEDLE = struct.Struct("<II")
_SEGMENT = struct.Struct("<IIIIQ")


@dataclass(frozen=True)
class TraceHeader:
    layers: int
    heads: int
    head_dim: int
    block_size: int
    token_count: int
    window: int
    init_tokens: int


def piece_bounds(start: int, length: int, init_tokens: int, block_size: int) -> list[tuple[int, int]]:
    """Split ``[start, start+length)`` at block boundaries into half-open pieces."""
    cuts = []
    pos, stop = start, start + length
    while pos < stop:
        if pos < init_tokens:
            nxt = init_tokens
        else:
            nxt = init_tokens + ((pos - init_tokens) // block_size + 1) * block_size
        end = min(nxt, stop)
        cuts.append((pos, end))
        pos = end
    return cuts


class Segment:
    """One step's worth of trace data.  Subclasses may compute layers lazily."""

    def __init__(self, index: int, kind: str, start: int, length: int, colmass_start: int, header: TraceHeader):
        if kind not in KINDS:
            raise InvalidTrace(f"unknown segment kind {kind!r}")
        self.index = index
        self.kind = kind
        self.start = start
        self.length = length
        self.colmass_start = colmass_start
        self.header = header

    @property
    def stop(self) -> int:
        return self.start + self.length

    def bounds(self) -> list[tuple[int, int]]:
        return piece_bounds(self.start, self.length, self.header.init_tokens, self.header.block_size)

    def pieces(self, layer: int) -> list[np.ndarray]:
        raise NotImplementedError

    def colmass(self, layer: int) -> np.ndarray:
        raise NotImplementedError

    def keys(self, layer: int) -> np.ndarray:
        raise NotImplementedError

    def queries(self, layer: int) -> np.ndarray:
        raise NotImplementedError


class ArraySegment(Segment):
    """Segment backed by per-layer arrays."""

    def __init__(self, index, kind, start, length, colmass_start, header, pieces, colmass, keys, queries):
        super().__init__(index, kind, start, length, colmass_start, header)
        self._pieces = pieces
        self._colmass = colmass
        self._keys = keys
        self._queries = queries

    def pieces(self, layer):
        return self._pieces[layer]

    def colmass(self, layer):
        return self._colmass[layer]

    def keys(self, layer):
        return self._keys[layer]

    def queries(self, layer):
        return self._queries[layer]


class Trace:
    """Header, needle annotations and an ordered segment sequence."""

    header: TraceHeader
    needles: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        raise NotImplementedError

    def segment(self, i: int) -> Segment:
        raise NotImplementedError

    def __iter__(self) -> Iterator[Segment]:
        for i in range(len(self)):
            yield self.segment(i)


class ListTrace(Trace):
    def __init__(self, header: TraceHeader, segments: Sequence[Segment], needles=()):
        self.header = header
        self.segments = list(segments)
        self.needles = tuple(tuple(n) for n in needles)

    def __len__(self):
        return len(self.segments)

    def segment(self, i):
        return self.segments[i]


def _segment_arrays(seg: Segment, layers: int) -> bytes:
    parts = []
    for layer in range(layers):
        for p in seg.pieces(layer):
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(seg.colmass(layer), dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(seg.keys(layer), dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(seg.queries(layer), dtype="<f4").tobytes())
    return b"".join(parts)


def write_trace(path: str | Path, trace: Trace) -> None:
    """Serialize ``trace`` to ``path`` in the fixed little-endian layout."""
    h = trace.header
    n_seg = len(trace)
    table_start = _HEADER.size + len(trace.needles) * _NEEDLE.size
    data_start = table_start + n_seg * _SEGMENT.size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h.layers, h.heads, h.head_dim, h.block_size,
                              h.token_count, h.window, h.init_tokens, n_seg, len(trace.needles)))
        for lo, hi in trace.needles:
            fh.write(_NEEDLE.pack(lo, hi))
        fh.write(b"\0" * (n_seg * _SEGMENT.size))
        offset = data_start
        entries = []
        for seg in trace:
            blob = _segment_arrays(seg, h.layers)
            fh.write(blob)
            entries.append(_SEGMENT.pack(seg.start, seg.length, KINDS.index(seg.kind), seg.colmass_start, offset))
            offset += len(blob)
        fh.seek(table_start)
        fh.write(b"".join(entries))


class _FileSegment(Segment):
    def __init__(self, index, kind, start, length, colmass_start, header, data: np.ndarray, offset: int):
        super().__init__(index, kind, start, length, colmass_start, header)
        self._layers = None
        self._data = data
        self._offset = offset

    def _parse(self):
        if self._layers is not None:
            return self._layers
        h = self.header
        pos = self._offset // 4
        layers = []
        cols = self.stop - self.colmass_start
        for _ in range(h.layers):
            pieces = []
            for lo, hi in self.bounds():
                n = hi - lo
                size = h.heads * n * n
                pieces.append(self._data[pos:pos + size].reshape(h.heads, n, n))
                pos += size
            size = h.heads * cols
            colmass = self._data[pos:pos + size].reshape(h.heads, cols)
            pos += size
            size = self.length * h.heads * h.head_dim
            keys = self._data[pos:pos + size].reshape(self.length, h.heads, h.head_dim)
            pos += size
            queries = self._data[pos:pos + size].reshape(self.length, h.heads, h.head_dim)
            pos += size
            layers.append((pieces, colmass, keys, queries))
        self._layers = layers
        return layers

    def pieces(self, layer):
        return self._parse()[layer][0]

    def colmass(self, layer):
        return self._parse()[layer][1]

    def keys(self, layer):
        return self._parse()[layer][2]

    def queries(self, layer):
        return self._parse()[layer][3]


class TraceFile(Trace):
    """Memory-mapped reader for a trace file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        raw = np.memmap(self.path, dtype=np.uint8, mode="r")
        if raw.size < _HEADER.size:
            raise InvalidTrace(f"{path}: file too short")
        magic, version, layers, heads, d, block, tokens, window, init, n_seg, n_needle = _HEADER.unpack(
            bytes(raw[:_HEADER.size]))
        if magic != MAGIC:
            raise InvalidTrace(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise InvalidTrace(f"{path}: unsupported version {version}")
        self.header = TraceHeader(layers, heads, d, block, tokens, window, init)
        pos = _HEADER.size
        needles = []
        for _ in range(n_needle):
            needles.append(_NEEDLE.unpack(bytes(raw[pos:pos + _NEEDLE.size])))
            pos += _NEEDLE.size
        self.needles = tuple(needles)
        self._table = []
        for _ in range(n_seg):
            self._table.append(_SEGMENT.unpack(bytes(raw[pos:pos + _SEGMENT.size])))
            pos += _SEGMENT.size
        if self._table and self._table[0][4] % 4:
            raise InvalidTrace(f"{path}: misaligned segment data")
        # data offsets are 4-byte aligned relative to file start
        self._floats = np.memmap(self.path, dtype="<f4", mode="r", offset=0,
                                 shape=(raw.size // 4,))

    def __len__(self):
        return len(self._table)

    def segment(self, i):
        start, length, kind, colmass_start, offset = self._table[i]
        if kind >= len(KINDS):
            raise InvalidTrace(f"segment {i}: unknown kind {kind}")
        return _FileSegment(i, KINDS[kind], start, length, colmass_start, self.header, self._floats, offset)
