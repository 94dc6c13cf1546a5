"""Command line entry point: ``mercpt --config run.json [--arm NAME] [--seed N] ...``"""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ARMS, ConfigError, NothingToReportError, emit_report, load_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mercpt", description="Continual pre-training experiments with replay and Reptile.")
    p.add_argument("--config", metavar="PATH", help="JSON run configuration (defaults used for missing fields)")
    p.add_argument("--arm", choices=list(ARMS), help="run only this arm")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out", metavar="DIR", help="override output_dir from the config")
    p.add_argument("--resume", action="store_true", help="discard and rerun cells left incomplete by a crash")
    p.add_argument("--report-only", action="store_true", help="regenerate the report from metrics.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, output_dir=args.out)
        if args.report_only:
            paths = emit_report(cfg.output_dir)
        else:
            out = run_experiment(
                cfg,
                arms=[args.arm] if args.arm else None,
                seeds=[args.seed] if args.seed is not None else None,
                resume=args.resume,
            )
            paths = {"report": out / "report.txt"}
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (NothingToReportError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(paths["report"].read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
