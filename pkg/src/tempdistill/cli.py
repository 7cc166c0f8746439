"""Command line entry point: ``tempdistill {verify,train,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import harness as H
from .verify import run_verification_suite

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_BAD_CONFIG = 2

log = logging.getLogger("tempdistill")


def _out_root(arg: Optional[str]) -> str:
    return arg or H.default_output_root()


def cmd_verify(args) -> int:
    report = run_verification_suite(args.out)
    n_eq, n_gc, n_inv = (len(report[k]) for k in ("equivalence", "gradcheck", "invariants"))
    print(f"oracle equivalence: {sum(r['passed'] for r in report['equivalence'])}/{n_eq} ops")
    print(f"gradient checks:    {sum(r['passed'] for r in report['gradcheck'])}/{n_gc}")
    print(f"invariants:         {sum(r['passed'] for r in report['invariants'])}/{n_inv}")
    print(f"runtime:            {report['runtime_s']:.2f}s")
    if args.out:
        print(f"report written to {args.out}")
    if report["passed"]:
        print("verification PASSED")
        return EXIT_OK
    for name in report["failures"]:
        print(f"FAILED {name}", file=sys.stderr)
    return EXIT_VERIFY_FAILED


def cmd_train(args) -> int:
    cfg = H.load_config(args.config, seed=args.seed)
    report = H.train_distill(cfg, out_root=_out_root(args.out))
    H.summarize_run(report.run_dir)
    final = report.final
    print(f"mode {report.mode}, components {report.components or ['none']}")
    print(f"alignment_mse {final['alignment_mse']:.6f}  position_err {final['mean_position_error']:.4f}  "
          f"velocity_err {final['mean_velocity_error']:.4f}  ({report.wall_clock_s:.1f}s)")
    print(f"run written to {report.run_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = H.load_config(args.config, seed=args.seed)
    try:
        rows, path = H.run_ablation(args.kind, base=cfg, out_root=_out_root(args.out))
    except ValueError as exc:  # unknown kind or a grid point the config cannot accept
        raise H.ConfigError(str(exc)) from exc
    print(H.format_table_text(rows))
    print(f"table written to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not (run / "metrics.json").is_file():
        raise H.ConfigError(f"{run} is not a run directory (no metrics.json)")
    curves, summary = H.summarize_run(run)
    print(json.dumps(json.loads(summary.read_text())["final"], indent=2, sort_keys=True))
    print(f"curves: {curves}")
    print(f"summary: {summary}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempdistill", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="oracle equivalence, gradient checks and invariants")
    v.add_argument("--out", help="write the JSON report here")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one student against the frozen teacher")
    t.add_argument("--config", required=True, help="YAML config file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help=f"output root (default ${H.OUTPUT_ENV} or ./runs)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("--kind", required=True, choices=H.ABLATION_KINDS)
    a.add_argument("--config", required=True, help="YAML config file for the base run")
    a.add_argument("--seed", type=int, help="override the config seed")
    a.add_argument("--out", help=f"output root (default ${H.OUTPUT_ENV} or ./runs)")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="write curves.csv and summary.json for a run")
    r.add_argument("--run", required=True, help="run directory produced by train")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except H.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
