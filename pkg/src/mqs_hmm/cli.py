"""Command line entry points: run, sweep and compare."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import metrics, runner
from .config import parse_config
from .errors import ConfigError, MqsError, ProbeError, SolverError, UndefinedErrorMetric

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

log = logging.getLogger("mqs_hmm")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mqs-hmm", description="Two-scale and fullscale eddy-current solvers.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one solver and write its CSV outputs")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--mode", choices=("multiscale", "reference", "static"))
    run.add_argument("--threads", type=int)
    run.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
    sw = sub.add_parser("sweep", help="loss error of the two-scale model against the reference per frequency")
    sw.add_argument("--config", required=True, type=Path)
    sw.add_argument("--freqs", required=True, help="comma-separated frequencies in Hz")
    sw.add_argument("--processes", type=int, default=1)
    sw.add_argument("--out", type=Path)
    cmp_ = sub.add_parser("compare", help="error report of a two-scale run against a reference run")
    cmp_.add_argument("--ref", required=True, type=Path)
    cmp_.add_argument("--ms", required=True, type=Path)
    cmp_.add_argument("--probes", type=Path)
    return p


def _log_to(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="ascii")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _run(args) -> int:
    cfg = parse_config(args.config)
    updates = {}
    if args.mode:
        updates["run"] = {"mode": args.mode}
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        updates.setdefault("run", {})["threads"] = args.threads
    if args.out is not None:
        updates["output"] = {"dir": str(args.out)}
    cfg = cfg.with_values(**updates)
    if cfg.mode == "sweep":
        raise ConfigError("mode 'sweep' runs through the sweep command")
    handler = _log_to(cfg.out_dir)
    try:
        t0 = time.perf_counter()
        log.info("mode %s", cfg.mode)
        result = runner.execute(cfg, on_step=lambda d: log.info(d.log_line()))
        runner.write_outputs(cfg, result)
        for d in result.diagnostics if cfg.mode == "static" else []:
            log.info(d.log_line())
        log.info("wall time %.3f s", time.perf_counter() - t0)
    finally:
        log.removeHandler(handler)
        handler.close()
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def _sweep(args) -> int:
    cfg = parse_config(args.config)
    try:
        freqs = [float(f) for f in args.freqs.split(",") if f.strip()]
    except ValueError:
        raise ConfigError(f"--freqs: cannot parse {args.freqs!r}") from None
    if not freqs or any(f <= 0 for f in freqs):
        raise ConfigError("--freqs needs positive frequencies")
    out = args.out or cfg.out_dir
    handler = _log_to(Path(out))
    try:
        rows = runner.sweep(cfg, freqs, out, args.processes)
    finally:
        log.removeHandler(handler)
        handler.close()
    for f, e, status in rows:
        print(f"{f!r},{e!r},{status}")
    print("nondecreasing" if metrics.is_nondecreasing([r[1] for r in rows]) else "not nondecreasing")
    return EXIT_SOLVER if any(r[2] != "ok" for r in rows) else EXIT_OK


def _compare(args) -> int:
    points = metrics.read_probes(args.probes) if args.probes else None
    report = runner.compare_runs(args.ref, args.ms, points)
    print("metric,value")
    for line in report.lines():
        print(line)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    handler = {"run": _run, "sweep": _sweep, "compare": _compare}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, UndefinedErrorMetric, ProbeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except MqsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
