"""``ltri`` command line.

Exit codes: 0 success, 2 configuration error, 3 invalid trace, 4 failed
recall gate (``niah --gate``).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, InvalidTrace, LtriError
from .harness import (
    apply_ablation,
    calibrate,
    desk_config,
    lambda_sweep,
    lambda_sweep_csv,
    niah_gate,
    niah_grid,
    parse_ablate,
    read_steps,
    run_many,
    tune,
    write_reports,
    write_run,
)
from .stream_engine import EngineConfig
from .synthetic import SyntheticTrace, TraceSpec
from .trace_io import TraceFile, write_trace

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_GATE = 0, 2, 3, 4


def _read_json(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _load_config(path: str | None) -> tuple[dict, dict | None]:
    """``(trace spec dict, engine dict or None)``.

    A config file holds ``{"trace": {...}, "engine": {...}}``, either part optional.
    """
    if path is None:
        return {}, None
    data = _read_json(path)
    extra = set(data) - {"trace", "engine"}
    if extra:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(extra)}; use 'trace' and 'engine'")
    return data.get("trace", {}), data.get("engine")


def _spec(args, trace_dict: dict) -> TraceSpec:
    d = dict(trace_dict)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "tokens", None) is not None:
        d["total_tokens"] = args.tokens
    return TraceSpec.from_dict(d)


def _trace_and_spec(args, trace_dict: dict):
    """The trace to run and the spec describing it; a file's ``.json`` sidecar fills in the spec."""
    if args.trace is None:
        spec = _spec(args, trace_dict)
        return SyntheticTrace(spec), spec
    trace = TraceFile(args.trace)
    sidecar = Path(str(args.trace) + ".json")
    if not trace_dict and sidecar.exists():
        trace_dict = _read_json(str(sidecar))
    return trace, TraceSpec.from_dict(trace_dict)


def _engine(args, spec: TraceSpec, engine_dict: dict | None) -> EngineConfig:
    cfg = EngineConfig.from_dict(engine_dict) if engine_dict is not None else desk_config(spec)
    if getattr(args, "ablate", None):
        cfg = apply_ablation(cfg, parse_ablate(args.ablate))
    if getattr(args, "persistent", None) is not None:
        cfg = cfg.with_flags(persistent=args.persistent == "on")
    if getattr(args, "ratio_mode", None) is not None:
        cfg = cfg.with_flags(ratio_mode=args.ratio_mode)
    if getattr(args, "inject_evidence", False):
        cfg = cfg.with_flags(inject_evidence=True)
    return cfg


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    trace_d, _ = _load_config(args.config)
    spec = _spec(args, trace_d)
    write_trace(args.out, SyntheticTrace(spec))
    Path(str(args.out) + ".json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_tune(args) -> int:
    trace_d, _ = _load_config(args.config)
    spec = _spec(args, trace_d)
    res = tune(spec, args.layer, args.trials, args.search_seed, args.traces, args.blocks)
    _emit(res, args.out)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    trace_d, engine_d = _load_config(args.config)
    trace, spec = _trace_and_spec(args, trace_d)
    cfg = _engine(args, spec, engine_d)
    layers = args.layers or [h[0] for h in (cfg.retrieval_heads or ())] or list(range(trace.header.layers))
    result = calibrate(trace, layers, args.target, cfg, args.blocks)
    _emit({
        "target_ratio": args.target,
        "lambdas": {str(l): lam for l, (lam, _) in result.items()},
        "tables": {str(l): json.loads(t.to_json()) for l, (_, t) in result.items()},
    }, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    trace_d, engine_d = _load_config(args.config)
    trace, spec = _trace_and_spec(args, trace_d)
    cfg = _engine(args, spec, engine_d)
    engine = run_many(trace, {"run": cfg}, spill_dir=args.spill_dir)["run"]
    write_run(args.out, engine)
    return EXIT_OK


def cmd_niah(args) -> int:
    trace_d, engine_d = _load_config(args.config)
    spec = _spec(args, trace_d)
    if args.blocks is not None:
        spec = TraceSpec.from_dict({**spec.to_dict(), "total_tokens": args.blocks * spec.block_size})
    # the injected twin is the gate's job; the base config stays uninjected
    cfg = _engine(args, spec, engine_d).with_flags(inject_evidence=False)
    if args.positions or args.lengths:
        positions = args.positions or [0.1, 0.3, 0.5, 0.7, 0.9]
        lengths = args.lengths or [spec.total_tokens]
        grid = niah_grid(positions, lengths, spec, cfg)
        _emit({"grid": grid}, args.out)
        return EXIT_OK
    start = spec.seed
    progress = None
    if args.verbose:
        def progress(seed, plain, inj):
            print(f"seed {seed}: recall {plain:.4f}" + ("" if inj is None else f", injected {inj:.4f}"),
                  file=sys.stderr, flush=True)
    res = niah_gate(range(start, start + args.seeds), spec, cfg, inject=args.inject_evidence,
                    progress=progress, workers=args.workers)
    _emit(res.as_dict(), args.out)
    if args.gate and not res.passed:
        return EXIT_GATE
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    steps_path = run_dir / "steps.jsonl"
    if not steps_path.exists():
        raise ConfigError(f"{run_dir} holds no steps.jsonl")
    summary = _read_json(str(run_dir / "summary.json"))
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out, read_steps(steps_path), summary["config_echo"])
    if args.trace:
        cfg = EngineConfig.from_dict(summary["config_echo"])
        trace = TraceFile(args.trace)
        layers = summary["layers"]
        sweep = lambda_sweep(trace, layers, cfg, args.lambdas, args.blocks)
        (out / "lambda_sweep.csv").write_text(lambda_sweep_csv(sweep))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ltri", description="Trace-driven long-context memory engine")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, engine=True):
        sp.add_argument("--config", help="JSON file with optional 'trace' and 'engine' sections")
        sp.add_argument("--seed", type=int, help="synthetic trace seed")
        sp.add_argument("--tokens", type=int, help="synthetic prefill length in tokens")
        if engine:
            sp.add_argument("--ablate", help="components to switch off, e.g. P,RH,V")
            sp.add_argument("--persistent", choices=("on", "off"))
            sp.add_argument("--ratio-mode", choices=("row", "col", "rowcol"))
        sp.add_argument("--out", help="output path")

    sp = sub.add_parser("gen-trace", help="write a synthetic trace file (plus a .json spec sidecar)")
    common(sp, engine=False)
    sp.set_defaults(func=cmd_gen_trace)

    sp = sub.add_parser("tune", help="random-search span thresholds on planted spans")
    common(sp, engine=False)
    sp.add_argument("--layer", type=int, default=1)
    sp.add_argument("--trials", type=int, default=50)
    sp.add_argument("--search-seed", type=int, default=0)
    sp.add_argument("--traces", type=int, default=1)
    sp.add_argument("--blocks", type=int, default=64, help="labeled blocks per trace")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("calibrate", help="per-layer lambda for a target compression ratio")
    common(sp)
    sp.add_argument("--target", type=float, required=True)
    sp.add_argument("--trace", help="trace file (default: synthetic from the trace settings)")
    sp.add_argument("--layers", type=_ints)
    sp.add_argument("--blocks", type=int, default=None, help="blocks sampled per layer")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("run", help="stream a trace through the engine and write reports")
    common(sp)
    sp.add_argument("trace", nargs="?", help="trace file (default: synthetic from the trace settings)")
    sp.add_argument("--inject-evidence", action="store_true")
    sp.add_argument("--spill-dir")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("niah", help="needle recall over seeded synthetic streams")
    common(sp)
    sp.add_argument("--seeds", type=int, default=100, help="number of consecutive seeds from --seed")
    sp.add_argument("--blocks", type=int, help="stream length in blocks")
    sp.add_argument("--inject-evidence", action="store_true", help="also run an injected twin per seed")
    sp.add_argument("--gate", action="store_true", help="exit 4 when the recall gate fails")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--positions", type=_floats, help="needle position grid, e.g. 0.1,0.5,0.9")
    sp.add_argument("--lengths", type=_ints, help="context length grid in tokens")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_niah)

    sp = sub.add_parser("report", help="rebuild CSV reports from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="output directory (default: the run directory)")
    sp.add_argument("--trace", help="trace file for the lambda sweep")
    sp.add_argument("--lambdas", type=_floats, default=[3, 4, 5, 6, 7, 8, 9, 10])
    sp.add_argument("--blocks", type=int, default=None, help="blocks sampled per layer in the sweep")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidTrace as exc:
        print(f"invalid trace: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except LtriError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
