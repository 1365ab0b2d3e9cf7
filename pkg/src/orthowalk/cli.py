"""``orthowalk`` command line.

Subcommands: generate, solve, walk, harmonic-measure, counterexample,
convergence, verify.  Exit codes: 0 success, 2 configuration or input error,
3 numerical failure, 4 invariant failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .errors import ConfigError, DisconnectedComponent, NumericalFailure, OrthowalkError
from .experiments import (
    build_level,
    convergence_csv,
    counterexample_csv,
    harmonic_measure_csv,
    load_config,
    run_convergence,
    run_counterexample,
    run_harmonic_measure,
    run_solve,
    run_walk,
)
from .invariants import run_invariants
from .io import atomic_write, dumps_tiling, loads_tiling, to_jsonable
from .tilings import Tiling, hypothesis_report
from .walks import trace_csv, walk_trace_export

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 2, 3, 4


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("ORTHOWALK_THREADS", "1")
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"ORTHOWALK_THREADS must be an integer, got {env!r}") from exc
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


def _config(args):
    if args.config is None:
        raise ConfigError("--config is required for this command")
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed)).validate()
    return cfg


def _emit(args, text):
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


def _read_tiling(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return loads_tiling(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read tiling: {exc}") from exc


def _tiling_for(cfg, level=0):
    return _read_tiling(cfg.tiling) if cfg.tiling else build_level(cfg, level)


def cmd_generate(args):
    cfg = _config(args)
    t = build_level(cfg, args.level)
    text = dumps_tiling(t)
    _emit(args, text)
    if isinstance(t, Tiling):
        report = {"n_sites": t.n, **hypothesis_report(t).to_dict()}
    else:
        report = {"n_sites": t.n, "n_edges": len(t.edges), "A": len(t.meta["A"]), "B": len(t.meta["B"])}
    # without --out the tiling owns stdout, so the report goes to stderr
    stream = sys.stdout if args.out else sys.stderr
    stream.write(json.dumps(to_jsonable(report), sort_keys=True) + "\n")
    return EXIT_OK


def cmd_solve(args):
    cfg = _config(args)
    _emit(args, run_solve(cfg, _tiling_for(cfg)))
    return EXIT_OK


def cmd_walk(args):
    cfg = _config(args)
    t = _tiling_for(cfg)
    trace = walk_trace_export(run_walk(cfg, t), t)
    if args.out and args.out.endswith(".csv"):
        _emit(args, trace_csv(trace))
    else:
        _emit(args, json.dumps(trace, separators=(",", ":")) + "\n")
    return EXIT_OK


def cmd_harmonic_measure(args):
    cfg = _config(args)
    _emit(args, harmonic_measure_csv(cfg, run_harmonic_measure(cfg, _threads(args))))
    return EXIT_OK


def cmd_counterexample(args):
    cfg = _config(args)
    _emit(args, counterexample_csv(cfg, run_counterexample(cfg, _threads(args))))
    return EXIT_OK


def cmd_convergence(args):
    cfg = _config(args)
    rows, fit = run_convergence(cfg, _threads(args))
    _emit(args, convergence_csv(cfg, rows, fit))
    return EXIT_OK


def cmd_verify(args):
    path = args.tiling_file or args.config
    if path is None:
        raise ConfigError("verify needs a tiling file")
    t = _read_tiling(path)
    results = run_invariants(t)
    failures = [r.to_dict() for r in results if not r.passed]
    report = {"passed": not failures, "failures": failures,
              "results": [r.to_dict() for r in results]}
    _emit(args, json.dumps(report, sort_keys=True, indent=1) + "\n")
    return EXIT_OK if not failures else EXIT_INVARIANT


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "walk": cmd_walk,
    "harmonic-measure": cmd_harmonic_measure,
    "counterexample": cmd_counterexample,
    "convergence": cmd_convergence,
    "verify": cmd_verify,
}


def build_parser():
    p = argparse.ArgumentParser(prog="orthowalk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--threads", type=int, help="worker threads (default: $ORTHOWALK_THREADS or 1)")
        if name == "generate":
            sp.add_argument("--level", type=int, default=0, help="refinement level to build")
        if name == "verify":
            sp.add_argument("tiling_file", nargs="?", help="tiling JSON to check")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"orthowalk: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DisconnectedComponent) as exc:
        print(f"orthowalk: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OrthowalkError, ValueError) as exc:
        print(f"orthowalk: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
