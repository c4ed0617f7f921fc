import struct
from pathlib import Path

import numpy as np
import pytest

from ltri.errors import InvalidTrace
from ltri.trace_io import ArraySegment, ListTrace, TraceFile, TraceHeader, piece_bounds, write_trace

GOLDEN = Path(__file__).parent / "data" / "tiny_trace.ltri"
HEADER = TraceHeader(layers=2, heads=1, head_dim=2, block_size=4, token_count=10, window=4, init_tokens=2)
LAYOUT = [("prefill", 0, 6), ("final", 6, 2), ("decode", 8, 1), ("decode", 9, 1)]


def tiny_trace() -> ListTrace:
    """Hand-sized trace whose float payload is a running counter, so every byte is predictable."""
    counter = iter(range(1, 10**6))
    segs = []
    for i, (kind, start, n) in enumerate(LAYOUT):
        cm_start = max(0, start - HEADER.window)
        bounds = piece_bounds(start, n, HEADER.init_tokens, HEADER.block_size)
        pieces, colmass, keys, queries = [], [], [], []
        for _ in range(HEADER.layers):
            ps = []
            for lo, hi in bounds:
                m = hi - lo
                ps.append(np.array([next(counter) for _ in range(m * m)], np.float32).reshape(1, m, m))
            pieces.append(ps)
            colmass.append(np.array([next(counter) for _ in range(start + n - cm_start)], np.float32)[None])
            keys.append(np.array([next(counter) for _ in range(2 * n)], np.float32).reshape(n, 1, 2))
            queries.append(np.array([next(counter) for _ in range(2 * n)], np.float32).reshape(n, 1, 2))
        segs.append(ArraySegment(i, kind, start, n, cm_start, HEADER, pieces, colmass, keys, queries))
    return ListTrace(HEADER, segs, needles=[(3, 4)])


def reference_bytes(trace: ListTrace) -> bytes:
    """Independent serializer straight from the documented layout."""
    h = trace.header
    head = struct.pack("<4s10I", b"LTRI", 1, h.layers, h.heads, h.head_dim, h.block_size,
                       h.token_count, h.window, h.init_tokens, len(trace.segments), len(trace.needles))
    needles = b"".join(struct.pack("<II", a, b) for a, b in trace.needles)
    data_start = len(head) + len(needles) + 24 * len(trace.segments)
    blobs, table = [], []
    offset = data_start
    for seg in trace.segments:
        floats = []
        for l in range(h.layers):
            for p in seg.pieces(l):
                floats.extend(p.ravel().tolist())
            floats.extend(seg.colmass(l).ravel().tolist())
            floats.extend(seg.keys(l).ravel().tolist())
            floats.extend(seg.queries(l).ravel().tolist())
        blob = struct.pack(f"<{len(floats)}f", *floats)
        table.append(struct.pack("<IIIIQ", seg.start, seg.length, ("prefill", "final", "decode").index(seg.kind),
                                 seg.colmass_start, offset))
        blobs.append(blob)
        offset += len(blob)
    return head + needles + b"".join(table) + b"".join(blobs)


def test_piece_bounds():
    assert piece_bounds(0, 6, 2, 4) == [(0, 2), (2, 6)]
    assert piece_bounds(5, 5, 2, 4) == [(5, 6), (6, 10)]
    assert piece_bounds(9, 1, 2, 4) == [(9, 10)]


def test_write_matches_reference_and_golden(tmp_path):
    path = tmp_path / "t.ltri"
    write_trace(path, tiny_trace())
    data = path.read_bytes()
    assert data == reference_bytes(tiny_trace())
    assert data == GOLDEN.read_bytes()


def test_round_trip():
    src = tiny_trace()
    back = TraceFile(GOLDEN)
    assert back.header == HEADER
    assert back.needles == ((3, 4),)
    assert len(back) == len(src)
    for a, b in zip(src, back):
        assert (a.kind, a.start, a.length, a.colmass_start) == (b.kind, b.start, b.length, b.colmass_start)
        for l in range(HEADER.layers):
            for pa, pb in zip(a.pieces(l), b.pieces(l)):
                np.testing.assert_array_equal(pa, pb)
            np.testing.assert_array_equal(a.colmass(l), b.colmass(l))
            np.testing.assert_array_equal(a.keys(l), b.keys(l))
            np.testing.assert_array_equal(a.queries(l), b.queries(l))


def test_rewrite_is_byte_identical(tmp_path):
    path = tmp_path / "again.ltri"
    write_trace(path, TraceFile(GOLDEN))
    assert path.read_bytes() == GOLDEN.read_bytes()


@pytest.mark.parametrize("patch,match", [
    ((0, b"XXXX"), "magic"),
    ((4, struct.pack("<I", 7)), "version"),
])
def test_bad_header(tmp_path, patch, match):
    data = bytearray(GOLDEN.read_bytes())
    at, blob = patch
    data[at:at + len(blob)] = blob
    path = tmp_path / "bad.ltri"
    path.write_bytes(bytes(data))
    with pytest.raises(InvalidTrace, match=match):
        TraceFile(path)


def test_truncated_and_bad_kind(tmp_path):
    path = tmp_path / "short.ltri"
    path.write_bytes(b"LTRI")
    with pytest.raises(InvalidTrace):
        TraceFile(path)
    data = bytearray(GOLDEN.read_bytes())
    table = 44 + 8
    data[table + 8:table + 12] = struct.pack("<I", 9)
    path.write_bytes(bytes(data))
    with pytest.raises(InvalidTrace, match="kind"):
        TraceFile(path).segment(0)


def test_unknown_kind_rejected():
    with pytest.raises(InvalidTrace):
        ArraySegment(0, "warmup", 0, 1, 0, HEADER, [], [], [], [])
