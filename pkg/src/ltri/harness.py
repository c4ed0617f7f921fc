"""Evaluation drivers over synthetic or file traces.

Recall runs, the {P, RH, V} ablation grid, threshold tuning, lambda
calibration and the CSV reports.  Several engine configurations can share one
pass over a trace: they are fed the same segment in lockstep and reuse each
other's span divisions, which depend only on the tile and the thresholds.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .context_memory import StreamConfig
from .errors import ConfigError
from .span_divider import LabeledBlock, divide_tile, span_f1, tune_thresholds
from .span_indexer import calibrate_lambda, confidence_ratio, dynamic_index, LambdaTable
from .stream_engine import EngineConfig, StepReport, StreamEngine
from .synthetic import SyntheticTrace, TraceSpec
from .trace_io import Trace
from .tri_attention import AttentionTile

ABLATION_FLAGS = ("P", "RH", "V")
GATE_RECALL = 0.95


# -- configuration -----------------------------------------------------------


def parse_ablate(text: str | None) -> frozenset[str]:
    """``"P,RH"`` -> the set of components switched off."""
    if not text:
        return frozenset()
    names = [t.strip().upper() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in ABLATION_FLAGS]
    if bad:
        raise ConfigError(f"unknown ablation flag(s) {bad}; choose from {ABLATION_FLAGS}")
    return frozenset(names)


def apply_ablation(config: EngineConfig, off: Iterable[str]) -> EngineConfig:
    """Switch off the named components; an empty set leaves ``config`` untouched."""
    off = set(off)
    if not off:
        return config
    return config.with_flags(persistent="P" not in off, use_heads="RH" not in off, voting="V" not in off)


def flags_of(config: EngineConfig) -> dict[str, bool]:
    return {"P": config.persistent, "RH": config.use_heads, "V": config.voting}


def ablation_grid() -> list[frozenset[str]]:
    """All 8 off-sets, from everything on to everything off."""
    out = []
    for mask in range(8):
        out.append(frozenset(f for i, f in enumerate(ABLATION_FLAGS) if mask >> i & 1))
    return out


def ablation_name(off: frozenset[str]) -> str:
    return "+".join(f"{f}{'-off' if f in off else ''}" for f in ABLATION_FLAGS)


def desk_config(spec: TraceSpec | None = None, **overrides) -> EngineConfig:
    """Engine settings matched to a synthetic spec's geometry and retrieval heads.

    Desk traces have only a handful of layers, so no layer gets the early-layer
    lambda.
    """
    spec = spec or TraceSpec()
    stream_kw = overrides.pop("stream", {})
    geometry = dict(
        init_tokens=spec.init_tokens, window=spec.window, block_size=spec.block_size,
        chunk_size=spec.chunk_size, last_chunk=spec.last_chunk,
    )
    stream = StreamConfig(**{**geometry, **stream_kw})
    kw = dict(stream=stream, retrieval_heads=spec.retrieval_heads, early_layers=0)
    kw.update(overrides)
    return EngineConfig(**kw)


# -- running -------------------------------------------------------------------


def run_many(
    trace: Trace,
    configs: Mapping[str, EngineConfig],
    spill_dir: str | Path | None = None,
    on_step: Callable[[str, StepReport], None] | None = None,
) -> dict[str, StreamEngine]:
    """Drive one engine per config over ``trace`` in a single pass."""
    engines = {}
    for name, cfg in configs.items():
        sub = None if spill_dir is None else Path(spill_dir) / name
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
        engines[name] = StreamEngine(trace.header, cfg, trace.needles, sub)
    memo: dict = {}
    for eng in engines.values():
        eng.division_memo = memo
    for seg in trace:
        memo.clear()
        for name, eng in engines.items():
            rep = eng.feed(seg)
            if on_step is not None:
                on_step(name, rep)
    memo.clear()
    for eng in engines.values():
        eng.division_memo = None
    return engines


@dataclass
class RecallReport:
    layers: list[int]
    matrix: list[list[bool]]  # layers x decode steps
    aggregate: float
    accounting: list[tuple[int, int]]  # (tokens seen, hot bytes) per step
    config_echo: dict
    flags: dict[str, bool]
    metric: str = "needle block present in the layer's retrieved set (recall is the only quality proxy)"

    @classmethod
    def from_steps(cls, steps: Sequence[dict], config_echo: dict) -> "RecallReport":
        """Build from serialized step reports alone."""
        decode = [s for s in steps if s["kind"] == "decode"]
        layers = [row["layer"] for row in decode[0]["layers"]] if decode else []
        matrix = [[bool(s["layers"][i]["needle_recalled"]) for s in decode] for i in range(len(layers))]
        cells = [c for row in matrix for c in row]
        agg = sum(cells) / len(cells) if cells else float("nan")
        acct = [(s["start"] + s["length"], s["hot_bytes"]) for s in steps]
        flags = {"P": config_echo["persistent"], "RH": config_echo["use_heads"], "V": config_echo["voting"]}
        return cls(layers, matrix, agg, acct, config_echo, flags)

    @classmethod
    def from_engine(cls, engine: StreamEngine) -> "RecallReport":
        return cls.from_steps([r.as_dict() for r in engine.reports], engine.config.to_dict())

    def as_dict(self) -> dict:
        return {
            "layers": self.layers,
            "recall_matrix": self.matrix,
            "aggregate_recall": round(self.aggregate, 6),
            "accounting": [list(a) for a in self.accounting],
            "config_echo": self.config_echo,
            "flags": self.flags,
            "metric": self.metric,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


def run_niah(trace: Trace, config: EngineConfig, ablate: Iterable[str] = ()) -> RecallReport:
    """Full engine run of ``trace`` with the given components switched off."""
    if not trace.needles:
        raise ConfigError("recall evaluation needs needle annotations")
    eng = run_many(trace, {"run": apply_ablation(config, ablate)})["run"]
    return RecallReport.from_engine(eng)


def run_ablations(trace: Trace, config: EngineConfig) -> dict[str, RecallReport]:
    """The 8 {P, RH, V} combinations over one trace pass."""
    full = config.with_flags(persistent=True, use_heads=True, voting=True)
    configs = {ablation_name(off): apply_ablation(full, off) for off in ablation_grid()}
    engines = run_many(trace, configs)
    return {name: RecallReport.from_engine(e) for name, e in engines.items()}


@dataclass
class GateResult:
    seeds: list[int]
    recall: list[float]
    inject_recall: list[float] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.recall)) if self.recall else float("nan")

    @property
    def inject_aggregate(self) -> float:
        return float(np.mean(self.inject_recall)) if self.inject_recall else float("nan")

    @property
    def passed(self) -> bool:
        ok = self.aggregate >= GATE_RECALL
        if self.inject_recall:
            ok = ok and self.inject_aggregate == 1.0
        return ok

    def as_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "recall": [round(r, 6) for r in self.recall],
            "aggregate_recall": round(self.aggregate, 6),
            "inject_recall": [round(r, 6) for r in self.inject_recall],
            "inject_aggregate_recall": None if not self.inject_recall else round(self.inject_aggregate, 6),
            "threshold": GATE_RECALL,
            "passed": self.passed,
            "seconds": round(self.seconds, 3),
        }


def _gate_seed(args) -> tuple[int, float, float | None]:
    seed, spec_dict, config, inject, ablate = args
    s = TraceSpec.from_dict({**spec_dict, "seed": seed})
    trace = SyntheticTrace(s)
    base = apply_ablation(config or desk_config(s), ablate)
    configs = {"plain": base}
    if inject:
        configs["inject"] = base.with_flags(inject_evidence=True)
    engines = run_many(trace, configs)
    plain = engines["plain"].summary().aggregate_recall
    return seed, plain, engines["inject"].summary().aggregate_recall if inject else None


def niah_gate(
    seeds: Iterable[int],
    spec: TraceSpec | None = None,
    config: EngineConfig | None = None,
    inject: bool = True,
    ablate: Iterable[str] = (),
    progress: Callable[[int, float, float | None], None] | None = None,
    workers: int | None = None,
) -> GateResult:
    """Recall over seeded synthetic streams; with ``inject`` an injected twin rides along each pass.

    Seeds are independent jobs spread over ``workers`` processes (default: one per CPU).
    """
    spec = spec or TraceSpec()
    t0 = time.perf_counter()
    seeds = list(seeds)
    jobs = [(seed, spec.to_dict(), config, inject, tuple(ablate)) for seed in seeds]
    workers = min(workers or os.cpu_count() or 1, max(1, len(jobs)))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = pool.map(_gate_seed, jobs)
            done = []
            for r in results:
                done.append(r)
                if progress is not None:
                    progress(*r)
    else:
        done = []
        for job in jobs:
            done.append(_gate_seed(job))
            if progress is not None:
                progress(*done[-1])
    res = GateResult(seeds, [r[1] for r in done], [r[2] for r in done] if inject else [])
    res.seconds = time.perf_counter() - t0
    return res


def niah_grid(
    positions: Sequence[float],
    lengths: Sequence[int],
    spec: TraceSpec | None = None,
    config: EngineConfig | None = None,
) -> list[dict]:
    """Aggregate recall over needle position x context length."""
    spec = spec or TraceSpec()
    out = []
    for n in lengths:
        for p in positions:
            s = TraceSpec.from_dict({**spec.to_dict(), "total_tokens": int(n), "needle_position": float(p)})
            rep = run_niah(SyntheticTrace(s), config or desk_config(s))
            out.append({"tokens": int(n), "position": float(p), "aggregate_recall": round(rep.aggregate, 6)})
    return out


# -- span ground truth -----------------------------------------------------------


def full_blocks(trace: Trace, layer: int):
    """Yield ``(start, tile)`` for every block-sized diagonal piece of ``layer``."""
    b = trace.header.block_size
    init = trace.header.init_tokens
    for seg in trace:
        if seg.kind == "decode":
            continue
        for (lo, hi), piece in zip(seg.bounds(), seg.pieces(layer)):
            if lo >= init and hi - lo == b and (lo - init) % b == 0:
                yield lo, piece


def labeled_blocks(trace: SyntheticTrace, layer: int, limit: int | None = None) -> list[LabeledBlock]:
    out = []
    for lo, piece in full_blocks(trace, layer):
        ev = tuple((a - lo, z - lo) for a, z in trace.planted_spans(lo, lo + piece.shape[-1]))
        out.append(LabeledBlock(AttentionTile(piece, layer, lo), ev, layer))
        if limit is not None and len(out) >= limit:
            break
    return out


def boundary_counts(
    blocks: Sequence[LabeledBlock], theta_quantile: float, phi: float, tol: int = 2
) -> tuple[int, int, int]:
    """Matched, predicted and true internal span boundaries, one-to-one within ``tol`` tokens.

    Partitions are completed without a span cap so every detected cut counts.
    """
    matched = n_pred = n_true = 0
    for blk in blocks:
        n = blk.tile.cols
        part, _ = divide_tile(blk.tile, theta_quantile, phi, n)
        pred = sorted(part.boundaries())
        true = sorted(lo for lo, _ in blk.evidence if lo > 0)
        n_pred += len(pred)
        n_true += len(true)
        free = list(true)
        for p in pred:
            best = min(free, key=lambda t: (abs(t - p), t), default=None)
            if best is not None and abs(best - p) <= tol:
                matched += 1
                free.remove(best)
    return matched, n_pred, n_true


def boundary_f1(blocks: Sequence[LabeledBlock], theta_quantile: float, phi: float, tol: int = 2) -> float:
    m, p, t = boundary_counts(blocks, theta_quantile, phi, tol)
    if m == 0:
        return 0.0
    prec, rec = m / p, m / t
    return 2 * prec * rec / (prec + rec)


def tune(spec: TraceSpec, layer: int, trials: int, seed: int, traces: int = 1, blocks_per_trace: int = 64):
    """Random-search thresholds on planted spans of ``traces`` synthetic streams."""
    blocks = []
    for i in range(traces):
        s = TraceSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i})
        blocks.extend(labeled_blocks(SyntheticTrace(s, check=False), layer, blocks_per_trace))
    q, phi = tune_thresholds(blocks, layer, trials, seed)
    return {"layer": layer, "theta_quantile": q, "iou_threshold": phi,
            "span_f1": round(span_f1(blocks, q, phi), 6),
            "boundary_f1": round(boundary_f1(blocks, q, phi), 6)}


# -- lambda calibration and sweep --------------------------------------------------


def _block_divisions(trace: Trace, layer: int, config: EngineConfig, limit: int | None):
    th = config.thresholds(layer)
    n_s = config.stream.spans_per_block
    for i, (lo, piece) in enumerate(full_blocks(trace, layer)):
        if limit is not None and i >= limit:
            break
        part, fld = divide_tile(AttentionTile(piece, layer, lo), th.theta_quantile, th.iou_threshold, n_s)
        yield lo, piece, part, fld


def ratio_samples(trace: Trace, layers: Sequence[int], config: EngineConfig, limit: int | None = None):
    """Confidence ratios of every span of the first ``limit`` full blocks per layer."""
    out: dict[int, list[float]] = {}
    for layer in layers:
        vals = out.setdefault(layer, [])
        for _, _, part, fld in _block_divisions(trace, layer, config, limit):
            vals.extend(confidence_ratio(fld, part, i, config.ratio_mode) for i in range(part.span_count))
    return out


def calibrate(
    trace: Trace, layers: Sequence[int], target: float, config: EngineConfig, limit: int | None = None
) -> dict[int, tuple[float, LambdaTable]]:
    samples = ratio_samples(trace, layers, config, limit)
    sc = config.stream
    return {
        layer: calibrate_lambda(
            samples, layer, target, block_size=sc.block_size, spans_per_block=sc.spans_per_block,
            min_v=config.min_vectors, max_per_span=sc.max_vectors, budget=sc.max_vectors,
        )
        for layer in layers
    }


def lambda_sweep(
    trace: Trace,
    layers: Sequence[int],
    config: EngineConfig,
    lambdas: Sequence[float] = tuple(range(3, 11)),
    limit: int | None = None,
) -> dict[int, list[tuple[float, float]]]:
    """Average index vectors per block for each layer and lambda, over the same divisions."""
    out: dict[int, list[tuple[float, float]]] = {}
    sc = config.stream
    for layer in layers:
        divs = list(_block_divisions(trace, layer, config, limit))
        rows = []
        for lam in lambdas:
            total = 0
            for _, piece, part, fld in divs:
                votes = piece.sum(axis=(0, 1), dtype=np.float64)
                keys = np.zeros((piece.shape[-1], 1), dtype=np.float32)
                idx = dynamic_index(fld, part, keys, votes, float(lam), config.min_vectors,
                                    sc.max_vectors, sc.max_vectors, config.ratio_mode)
                total += sum(ix.count for ix in idx)
            rows.append((float(lam), total / len(divs) if divs else 0.0))
        out[layer] = rows
    return out


# -- reports -----------------------------------------------------------------------


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def heatmap_csv(report: RecallReport) -> str:
    steps = len(report.matrix[0]) if report.matrix else 0
    rows = [["layer"] + [f"step{i}" for i in range(steps)]]
    rows += [[layer] + [int(c) for c in row] for layer, row in zip(report.layers, report.matrix)]
    return _csv(rows)


def accounting_csv(report: RecallReport) -> str:
    return _csv([["tokens", "hot_bytes"]] + [list(a) for a in report.accounting])


def lambda_sweep_csv(sweep: Mapping[int, Sequence[tuple[float, float]]]) -> str:
    rows = [["layer", "lambda", "avg_vectors_per_block"]]
    for layer in sorted(sweep):
        rows += [[layer, lam, round(v, 6)] for lam, v in sweep[layer]]
    return _csv(rows)


def write_run(out_dir: str | Path, engine: StreamEngine) -> dict[str, Path]:
    """Step log, summary, recall report and CSV views of a finished run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r.as_dict() for r in engine.reports]
    paths = {
        "steps": out / "steps.jsonl",
        "summary": out / "summary.json",
        "recall": out / "recall.json",
        "heatmap": out / "heatmap.csv",
        "accounting": out / "accounting.csv",
    }
    paths["steps"].write_text("".join(json.dumps(s, sort_keys=True) + "\n" for s in steps))
    paths["summary"].write_text(engine.summary().to_json() + "\n")
    write_reports(out, steps, engine.config.to_dict())
    return paths


def read_steps(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_reports(out_dir: str | Path, steps: Sequence[dict], config_echo: dict) -> RecallReport:
    """Recall report and CSV views rebuilt from a step log."""
    out = Path(out_dir)
    rep = RecallReport.from_steps(steps, config_echo)
    (out / "recall.json").write_text(rep.to_json() + "\n")
    (out / "heatmap.csv").write_text(heatmap_csv(rep))
    (out / "accounting.csv").write_text(accounting_csv(rep))
    return rep
