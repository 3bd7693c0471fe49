"""Command-line entry point: ``jangmots {run,check-data,gmt-test,convert}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(k):
    k = k if k is not None else os.environ.get("JANGMOTS_THREADS")
    if k is None:
        return
    for var in THREAD_VARS:
        os.environ[var] = str(int(k))


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--seed", type=_u64, help="random seed (overrides the config)")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP threads (default: $JANGMOTS_THREADS)")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = argparse.ArgumentParser(prog="jangmots", description="Find MOTS by blowing up regularized Jang equations.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline")
    sub.add_parser("check-data", parents=[common], help="instantiate the data and report trapping margins")
    g = sub.add_parser("gmt-test", parents=[common], help="almost-minimizing test on a saved grid field")
    g.add_argument("grid", type=Path, help="grid file holding a field named 'tu' (or --field)")
    g.add_argument("--field", default="tu")
    g.add_argument("--cval", type=float, required=True)
    g.add_argument("--K", type=int, default=8)
    g.add_argument("--windows", type=int, default=4)
    g.add_argument("--half-width", type=int, default=6)
    c = sub.add_parser("convert", parents=[common], help="grid <-> CSV conversion by file extension")
    c.add_argument("src", type=Path)
    c.add_argument("dst", type=Path)
    return p


def _load(args):
    from . import cli_io

    if args.config is None:
        raise cli_io.ValidationError(["--config is required"])
    cfg = cli_io.load_config(args.config)
    changes = {}
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        from dataclasses import replace

        cfg = replace(cfg, **changes)
    return cfg


def _print(obj):
    from .cli_io import _jsonable

    print(json.dumps(_jsonable(obj), indent=1, sort_keys=True))


def _cmd_run(args):
    from . import cli_io

    cfg = _load(args)
    result = cli_io.run_pipeline(cfg)
    _print({"pass": result.passed, "checks": result.data["checks"], "out": str(result.out_dir)})
    return result.exit_code


def _cmd_check_data(args):
    from . import datasets as ds

    cfg = _load(args)
    from .errors import JangMotsError

    stage = "data"
    try:
        data = ds.instantiate(cfg.data_family(), cfg.domain, cfg.h, cfg.C)
        stage = "margins"
        m = ds.trapping_margins(data)
    except JangMotsError as exc:
        exc.stage = stage
        raise
    _print({"C": data.C, "pnorm": data.pnorm, "chi": m.chi, "delta": m.delta, "threshold": m.threshold,
            "min_margin": m.min_margin})
    return 0


def _cmd_gmt_test(args):
    import numpy as np

    from . import cli_io, gmt

    grid = cli_io.load_fields(args.grid)
    if args.field not in grid.fields:
        raise cli_io.DimensionMismatch(f"grid has no field {args.field!r}")
    f = grid.fields[args.field]
    valid = np.ones(f.shape, bool)
    if "closure" in grid.fields:
        valid = grid.fields["closure"] > 0
    region = gmt.DiscreteRegion(f > 0, grid.h, valid=valid)
    wins = gmt.frontier_windows(region, args.windows, args.half_width)
    rep = gmt.almost_minimizing_test(region, args.cval, gmt.PerturbationBudget(args.K, wins))
    _print({"passed": rep.passed, "worst_margin": rep.worst_margin, "candidates": rep.candidates,
            "windows": len(wins)})
    return 0 if rep.passed and wins else 1


def _cmd_convert(args):
    from . import cli_io

    if args.src.suffix == ".csv":
        g = cli_io.csv_to_grid(args.src)
        cli_io.save_fields(args.dst, g.fields, g.h, g.lower, g.n)
    else:
        cli_io.grid_to_csv(cli_io.load_fields(args.src), args.dst)
    return 0


COMMANDS = {"run": _cmd_run, "check-data": _cmd_check_data, "gmt-test": _cmd_gmt_test, "convert": _cmd_convert}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .cli_io import EXIT_CODES
    from .errors import JangMotsError, ParseError, ValidationError

    try:
        return COMMANDS[args.command](args)
    except (ParseError, ValidationError) as exc:
        where = f" (line {exc.line}, column {exc.column})" if getattr(exc, "line", None) else ""
        print(f"config error{where}: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    except JangMotsError as exc:
        stage = getattr(exc, "stage", "unknown")
        print(f"{stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(stage, 1 if stage == "checks" else 8)


if __name__ == "__main__":
    sys.exit(main())
