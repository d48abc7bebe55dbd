"""Command line: ``superloc run|validate|spectrum <config.json>``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import experiments
from .experiments import ConfigError, ExperimentConfig
from .fem import NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser():
    ap = argparse.ArgumentParser(prog="superloc", description="SL-GFEM / SLOD experiment runner")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and write CSV + log")
    run.add_argument("config")
    run.add_argument("--threads", type=int, default=None, help="worker threads for patch problems")
    run.add_argument("--full-scale", action="store_true",
                     help="h = 2^-10, eps = 2^-8 (about a million fine DOFs; takes hours)")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--record-timing", action="store_true", help="fill the wall_ms column")

    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config")
    val.add_argument("--full-scale", action="store_true")

    spec = sub.add_parser("spectrum", help="write local singular values / eigenvalues")
    spec.add_argument("config")
    spec.add_argument("--full-scale", action="store_true")
    spec.add_argument("--out", default=None)
    return ap


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.full_scale:
        cfg = cfg.with_full_scale()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "validate":
            print(f"ok: {cfg.experiment}, method={cfg.method}, H={cfg.H}, ell={cfg.ell}, n={cfg.n}, p={cfg.p}")
        elif args.command == "run":
            rows = experiments.run(cfg, out_dir=args.out, record_timing=args.record_timing)
            print(f"{len(rows)} rows -> {experiments.output_path(cfg, args.out)}")
        else:
            entries = experiments.spectrum(cfg, out_dir=args.out)
            for e in entries:
                mark = "" if e.marker is None else f" (selected from k={e.marker})"
                print(f"{e.method} H={e.H:g} ell={e.ell} p={e.p}: {len(e.values)} values{mark}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
