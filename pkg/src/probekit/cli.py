"""Command-line entry point: ``probekit --config run.ini --stage run-all``."""
from __future__ import annotations

import argparse
import logging
import sys

from probekit import pipeline
from probekit.config import default_config, load_config
from probekit.errors import ConfigError, DependencyError, NumericError, TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("probekit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="probekit", description="Detector-guided generator probing pipeline.")
    p.add_argument("--config", help="run config file (defaults are used when omitted)")
    p.add_argument("--stage", default="run-all", help=f"one of: {', '.join(pipeline.STAGES)}")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--out", help="output directory (overrides io.out_dir)")
    p.add_argument("--rounds", type=int, help="override probe.rounds")
    p.add_argument("--precision", choices=("f32", "f64"), help="override io.precision")
    p.add_argument("--explain", action="store_true", help="print the stage dependency graph and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.explain:
        print(pipeline.explain())
        return EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.seed is not None:
            cfg = cfg.override(seed=args.seed)
        if args.rounds is not None:
            cfg = cfg.override("probe", rounds=args.rounds)
        if args.precision is not None:
            cfg = cfg.override("io", precision=args.precision)
        if args.stage not in pipeline.STAGES:
            raise ConfigError(f"unknown stage {args.stage!r}; choose from {', '.join(pipeline.STAGES)}")
        run = pipeline.run_stage(cfg, args.stage, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, TrainingError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(run.root)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
