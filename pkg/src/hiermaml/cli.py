"""Command-line entry point.

Verbs: gen-data, pretrain, train, eval, report, sweep, grad-check.
Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
divergence. HIERMAML_LOG selects the log level (error|info|debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import METHODS, SWEEP_AXES, load_config
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    IngestError,
    NonFiniteError,
)
from .metalearn import StepError

log = logging.getLogger("hiermaml")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _setup_logging():
    level_name = os.environ.get("HIERMAML_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        print(f"warning: HIERMAML_LOG={level_name!r} not in {sorted(levels)}; "
              "using info", file=sys.stderr)
        level_name = "info"
    logging.basicConfig(level=levels[level_name],
                        format="%(levelname)s %(name)s: %(message)s")


def _add_common(parser):
    parser.add_argument("--config", required=True, help="TOML experiment file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override every seed derived from the config")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--method", default=None, choices=METHODS,
                        help="override the configured method")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker threads for per-task evaluation")


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out_dir"] = args.out
    if getattr(args, "method", None) is not None:
        out["method"] = args.method
    if args.workers is not None:
        out["workers"] = args.workers
    return out


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hiermaml",
        description="Task-adaptive meta-learning experiments over an "
                    "easy-to-hard task hierarchy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset CSVs")
    _add_common(p)

    p = sub.add_parser("pretrain", help="fit the predictive model on the "
                                        "noise-free pretraining set")
    _add_common(p)

    p = sub.add_parser("train", help="train the configured method end to end")
    _add_common(p)

    p = sub.add_parser("eval", help="score a trained artifact on the test split")
    _add_common(p)
    p.add_argument("--artifact", default=None,
                   help="artifact file (defaults to the method's path under --out)")

    p = sub.add_parser("report", help="recompute aggregates from the per-sample "
                                      "dump and check them against aggregate.csv")
    p.add_argument("--eval-dir", required=True, help="directory written by eval")

    p = sub.add_parser("sweep", help="train+eval across one hyperparameter axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated integers within [1, 8]")

    p = sub.add_parser("grad-check", help="verify gradients against finite "
                                          "differences on random architectures")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    from . import harness

    try:
        if args.command == "grad-check":
            results = harness.cmd_grad_check(seed=args.seed, n_configs=args.configs,
                                             step=args.step, tol=args.tol)
            worst = max(r["max_rel_error"] for r in results)
            ok = all(r["ok"] for r in results)
            print(f"grad-check: {len(results)} configs, worst relative error "
                  f"{worst:.3e} -> {'ok' if ok else 'FAIL'}")
            return EXIT_OK if ok else EXIT_DIVERGENCE

        if args.command == "report":
            from .reports import recompute_aggregates_from_files
            import csv as _csv
            recomputed = recompute_aggregates_from_files(args.eval_dir)
            stored = {}
            with open(os.path.join(args.eval_dir, "aggregate.csv"), newline="",
                      encoding="utf-8") as fh:
                for row in _csv.DictReader(fh):
                    stored[row["subset"]] = float(row["r2"])
            ok = True
            for subset, (r2, mse, n) in recomputed.items():
                match = abs(stored[subset] - r2) <= 1e-12
                ok &= match
                print(f"{subset}: recomputed r2 {r2:.6f} stored {stored[subset]:.6f} "
                      f"({'match' if match else 'MISMATCH'})")
            return EXIT_OK if ok else EXIT_DIVERGENCE

        cfg = load_config(args.config, overrides=_overrides(args))
        if args.command == "gen-data":
            result = harness.cmd_gen_data(cfg)
            print(f"gen-data: {result['train_tasks']} train / "
                  f"{result['test_tasks']} test / "
                  f"{result['pretrain_tasks']} pretrain tasks")
            return EXIT_OK
        if args.command == "pretrain":
            result = harness.cmd_pretrain(cfg)
            print(f"pretrain: held-out r2 {result['heldout_r2']:.4f} "
                  f"({result['wall_s']:.1f}s) -> {result['path']}")
            return EXIT_OK
        if args.command == "train":
            result = harness.cmd_train(cfg)
            print(f"train[{cfg.method}]: {result['wall_s']:.1f}s "
                  f"-> {result['artifact']}")
            return EXIT_OK
        if args.command == "eval":
            result = harness.cmd_eval(cfg, artifact_file=args.artifact)
            agg = result["report"].aggregates
            parts = ", ".join(
                f"{k} r2 {agg[k][0]:.4f}" for k in ("whole", "low", "high")
                if k in agg
            )
            print(f"eval[{cfg.method}]: {parts or 'no tasks'}")
            return EXIT_OK
        if args.command == "sweep":
            values = [v for v in args.values.split(",") if v]
            result = harness.cmd_sweep(cfg, args.axis, values)
            for row in result["rows"]:
                print("sweep:", ",".join(str(v) for v in row))
            return EXIT_OK
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, StepError, NonFiniteError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
