"""Synthetic attention traces with planted spans and a needle.

Attention inside each block piece is block-diagonal by planted span: cells
within a span get a right-skewed weight around ``span_strength``, cells
across spans a flatter, lower background weight.  Needle keys in the planted
retrieval heads point along a per-head direction ``u`` that the final-chunk
and decode queries also follow; everything else is isotropic noise.

Segments are generated lazily and deterministically from ``(seed, segment,
layer)`` so a 64K-token stream never has to sit in memory at once.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, InvalidTrace
from .trace_io import Segment, Trace, TraceHeader, piece_bounds

_KEYS, _QUERIES, _TILES, _PLAN, _DIR, _SAL = range(6)


@dataclass(frozen=True)
class TraceSpec:
    seed: int = 0
    layers: int = 4
    heads: int = 2
    head_dim: int = 32
    total_tokens: int = 65536  # prefill tokens, question chunk included
    decode_steps: int = 26
    block_size: int = 128
    init_tokens: int = 128
    window: int = 4096
    chunk_size: int = 512
    last_chunk: int = 32
    span_min: int = 16
    span_max: int = 32
    needle_position: float | None = None  # fraction of the prefill; None draws from [0.1, 0.9]
    needle_length: int = 16
    within_block: bool = True
    rho_hi: float = 0.9
    rho_lo: float = 0.3
    needle_cos: float = 0.95
    background_cos: float = 0.0
    query_noise: float = 0.2
    decode_query_noise: float = 0.2
    span_strength: float = 0.008
    background_ratio: float = 0.4
    needle_isolation: float = 0.1  # scale on needle rows' cross-span attention
    needle_strength: float = 1.5  # scale on the needle's in-span attention
    salience: float = 0.1  # column mass from far queries, per query row and token
    needle_salience: float = 10.0  # extra salience (in mean-salience units) on needle tokens
    retrieval_heads: tuple[tuple[int, int, float], ...] = ((1, 0, 0.45), (2, 1, 0.3), (3, 0, 0.9))

    def __post_init__(self):
        if not self.rho_hi > self.rho_lo:
            raise ConfigError("rho_hi must exceed rho_lo")
        if self.needle_cos < self.rho_hi:
            raise ConfigError("needle_cos must reach rho_hi")
        if self.background_cos > self.rho_lo:
            raise ConfigError("background_cos must not exceed rho_lo")
        if self.total_tokens < self.window + self.block_size:
            raise ConfigError("total_tokens must be at least window + block_size")
        if not 1 <= self.span_min <= self.span_max:
            raise ConfigError("need 1 <= span_min <= span_max")
        if self.needle_length < 1:
            raise ConfigError("needle_length must be positive")
        if self.within_block and self.needle_length > self.block_size:
            raise ConfigError("needle longer than a block cannot sit within one block")
        if self.needle_position is not None and not 0.0 <= self.needle_position <= 1.0:
            raise ConfigError("needle_position must lie in [0, 1]")
        if not 0 < self.last_chunk < self.total_tokens - self.init_tokens:
            raise ConfigError("last_chunk out of range")
        if self.decode_steps < 0:
            raise ConfigError("decode_steps must be >= 0")
        if self.span_strength <= 0 or self.background_ratio < 0 or self.salience < 0 or self.needle_salience < 0 or self.needle_strength <= 0 or not 0 <= self.needle_isolation <= 1:
            raise ConfigError("attention strengths out of range")
        for layer, head, score in self.retrieval_heads:
            if not (0 <= layer < self.layers and 0 <= head < self.heads):
                raise ConfigError(f"retrieval head ({layer}, {head}) outside the model shape")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retrieval_heads"] = [list(h) for h in self.retrieval_heads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceSpec":
        d = dict(d)
        if "retrieval_heads" in d:
            d["retrieval_heads"] = tuple(tuple(h) for h in d["retrieval_heads"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trace spec keys {sorted(unknown)}")
        return cls(**d)


@lru_cache(maxsize=8)
def _lower(n: int) -> np.ndarray:
    m = np.tri(n, dtype=np.float32)
    m.flags.writeable = False
    return m


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.einsum("...i,...i->...", x, x))[..., None]


def _toward(u: np.ndarray, noise: np.ndarray, cos: float) -> np.ndarray:
    """Unit vectors whose expected cosine with ``u`` is about ``cos``."""
    w = _unit(noise)
    return _unit(cos * u + math.sqrt(max(0.0, 1.0 - cos * cos)) * w)


class SyntheticSegment(Segment):
    def __init__(self, trace: "SyntheticTrace", index: int, kind: str, start: int, length: int):
        h = trace.header
        super().__init__(index, kind, start, length, max(0, start - h.window), h)
        self._trace = trace
        self._cache: dict[tuple[str, int], object] = {}

    def _memo(self, name, layer, fn):
        key = (name, layer)
        if key not in self._cache:
            self._cache[key] = fn(layer)
        return self._cache[key]

    def pieces(self, layer):
        return self._memo("pieces", layer, lambda l: self._trace._pieces(self, l))

    def colmass(self, layer):
        return self._memo("colmass", layer, lambda l: self._trace._colmass(self, l))

    def keys(self, layer):
        return self._memo("keys", layer, lambda l: self._trace._keys(self, l))

    def queries(self, layer):
        return self._memo("queries", layer, lambda l: self._trace._queries(self, l))


class SyntheticTrace(Trace):
    """Lazy trace built from a :class:`TraceSpec`."""

    def __init__(self, spec: TraceSpec, check: bool = True):
        self.spec = spec
        s = spec
        n_total = s.total_tokens + s.decode_steps
        self.header = TraceHeader(s.layers, s.heads, s.head_dim, s.block_size, n_total, s.window, s.init_tokens)
        rng = _rng(s.seed, _PLAN)
        frac = s.needle_position if s.needle_position is not None else float(rng.uniform(0.1, 0.9))
        self.needle = self._place_needle(frac)
        self.needles = (self.needle,)
        self.span_id, self.span_starts = self._plan_spans(rng, n_total)
        self.salience = _rng(s.seed, _SAL).standard_exponential(n_total).astype(np.float32)
        self.salience[self.needle[0]:self.needle[1] + 1] += s.needle_salience
        self.signal = {(l, h) for l, h, _ in s.retrieval_heads}
        self.directions = {
            (l, h): _unit(_rng(s.seed, _DIR, l, h).standard_normal(s.head_dim))
            for l in range(s.layers) for h in range(s.heads)
        }
        self._layout = self._segments()
        if check:
            self.check_correlations()

    # -- layout ---------------------------------------------------------------

    def _place_needle(self, frac: float) -> tuple[int, int]:
        s = self.spec
        pos = int(round(frac * s.total_tokens))
        pos = min(max(pos, s.init_tokens), s.total_tokens - s.last_chunk - s.needle_length)
        if s.within_block:
            b_lo = s.init_tokens + (pos - s.init_tokens) // s.block_size * s.block_size
            pos = min(pos, b_lo + s.block_size - s.needle_length)
        return pos, pos + s.needle_length - 1

    def _plan_spans(self, rng, n_total):
        s = self.spec
        lo, hi = self.needle
        ids = np.empty(n_total, dtype=np.int64)
        starts = []
        pos = 0
        while pos < n_total:
            if pos == lo:
                length = s.needle_length
            else:
                length = int(rng.integers(s.span_min, s.span_max + 1))
                if pos < lo < pos + length:
                    length = lo - pos
            length = min(length, n_total - pos)
            ids[pos:pos + length] = len(starts)
            starts.append(pos)
            pos += length
        return ids, np.array(starts + [n_total])

    def _segments(self):
        s = self.spec
        out = []
        prefill_end = s.total_tokens - s.last_chunk
        pos = 0
        while pos < prefill_end:
            n = min(s.chunk_size, prefill_end - pos)
            out.append(("prefill", pos, n))
            pos += n
        out.append(("final", prefill_end, s.last_chunk))
        for t in range(s.decode_steps):
            out.append(("decode", s.total_tokens + t, 1))
        return out

    def __len__(self):
        return len(self._layout)

    def segment(self, i):
        kind, start, length = self._layout[i]
        return SyntheticSegment(self, i, kind, start, length)

    def planted_spans(self, lo: int, hi: int) -> list[tuple[int, int]]:
        """Planted span intervals clipped to the half-open range ``[lo, hi)``."""
        first, last = self.span_id[lo], self.span_id[hi - 1]
        return [
            (max(int(self.span_starts[i]), lo), min(int(self.span_starts[i + 1]), hi) - 1)
            for i in range(first, last + 1)
        ]

    # -- per-segment content ------------------------------------------------------

    def _pieces(self, seg: SyntheticSegment, layer: int) -> list[np.ndarray]:
        s = self.spec
        rng = _rng(s.seed, _TILES, seg.index, layer)
        nlo, nhi = self.needle
        a = np.float32(s.span_strength)
        c = np.float32(s.span_strength * s.background_ratio)
        out = []
        for lo, hi in seg.bounds():
            n = hi - lo
            sid = self.span_id[lo:hi]
            same = sid[:, None] == sid[None, :]
            # one draw serves both regions: skewed inside spans, clipped and flat outside
            e = rng.standard_exponential((s.heads, n, n), dtype=np.float32)
            tile = np.minimum(e, np.float32(2.0))
            tile *= np.float32(0.1) * c
            tile += np.float32(0.9) * c
            e *= np.float32(0.5) * a
            e += np.float32(0.5) * a
            np.copyto(tile, e, where=same)
            tile *= _lower(n)
            if lo <= nhi and nlo < hi:
                rows = np.arange(lo, hi)
                needle_row = (rows >= nlo) & (rows <= nhi)
                cross = np.where(same, np.float32(s.needle_strength), np.float32(s.needle_isolation))
                tile *= np.where(needle_row[:, None], cross, np.float32(1.0))
            mass = tile.sum(axis=2, keepdims=True)
            if mass.max() > 0.98:
                tile *= np.where(mass > 0.98, np.float32(0.98) / np.maximum(mass, np.float32(1e-30)), np.float32(1.0))
            out.append(tile)
        return out

    def _colmass(self, seg: SyntheticSegment, layer: int) -> np.ndarray:
        s = self.spec
        cols = self.salience[seg.colmass_start:seg.stop]
        w = (s.salience * seg.length / s.window) * cols
        return np.broadcast_to(w, (s.heads, w.size)).astype(np.float32)

    def _keys(self, seg: SyntheticSegment, layer: int) -> np.ndarray:
        s = self.spec
        rng = _rng(s.seed, _KEYS, seg.index, layer)
        noise = rng.standard_normal((seg.length, s.heads, s.head_dim), dtype=np.float32)
        keys = np.empty_like(noise)
        pos = np.arange(seg.start, seg.stop)
        in_needle = (pos >= self.needle[0]) & (pos <= self.needle[1])
        for h in range(s.heads):
            u = self.directions[(layer, h)]
            keys[:, h] = _toward(u, noise[:, h], s.background_cos) if s.background_cos else _unit(noise[:, h])
            if (layer, h) in self.signal and in_needle.any():
                keys[in_needle, h] = _toward(u, noise[in_needle, h], s.needle_cos)
        return keys.astype(np.float32)

    def _queries(self, seg: SyntheticSegment, layer: int) -> np.ndarray:
        s = self.spec
        rng = _rng(s.seed, _QUERIES, seg.index, layer)
        noise = rng.standard_normal((seg.length, s.heads, s.head_dim), dtype=np.float32)
        q = _unit(noise)
        if seg.kind != "prefill":
            sigma = s.query_noise if seg.kind == "final" else s.decode_query_noise
            for h in range(s.heads):
                if (layer, h) in self.signal:
                    u = self.directions[(layer, h)]
                    q[:, h] = _unit(u + sigma * _unit(noise[:, h]))
        return q.astype(np.float32)

    # -- generation-time statistics gate --------------------------------------------

    def correlation_stats(self) -> dict:
        """Mean cosine of needle and background keys against the mean final-chunk query, signal heads only."""
        final = self.segment(next(i for i, (k, _, _) in enumerate(self._layout) if k == "final"))
        lo, hi = self.needle
        needle_cos, background_cos = [], []
        for layer, head in sorted(self.signal):
            qdir = _unit(final.queries(layer)[:, head].astype(np.float64).mean(axis=0))
            for seg_i, (_, start, length) in enumerate(self._layout):
                if start <= lo < start + length or seg_i == 0:
                    seg = self.segment(seg_i)
                    k = seg.keys(layer)[:, head].astype(np.float64)
                    pos = np.arange(seg.start, seg.stop)
                    mask = (pos >= lo) & (pos <= hi)
                    cos = k @ qdir / np.linalg.norm(k, axis=1)
                    needle_cos.extend(cos[mask])
                    background_cos.extend(cos[~mask])
        return {"needle": np.asarray(needle_cos), "background": np.asarray(background_cos)}

    def check_correlations(self) -> None:
        """3-sigma check that realized cosines match the requested correlation levels."""
        s = self.spec
        if not self.signal:
            return
        stats = self.correlation_stats()
        nd, bg = stats["needle"], stats["background"]
        if nd.size:
            se = nd.std() / math.sqrt(nd.size) if nd.size > 1 else 0.0
            if nd.mean() + 3 * se < s.rho_hi:
                raise InvalidTrace(f"needle keys mean cosine {nd.mean():.3f} below rho_hi {s.rho_hi}")
        if bg.size:
            se = bg.std() / math.sqrt(bg.size)
            if bg.mean() - 3 * se > s.rho_lo:
                raise InvalidTrace(f"background keys mean cosine {bg.mean():.3f} above rho_lo {s.rho_lo}")


def gen_trace(spec: TraceSpec) -> SyntheticTrace:
    return SyntheticTrace(spec)
