"""Command-line interface: profile | tune-thresholds | train-predictors |
finetune | bench | report."""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import RunConfig
from .errors import ContractError, DataError, DependencyError, LoadError


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--seed", type=int, help="override training seed")
    p.add_argument("--out", help="override output directory")
    p.add_argument("--seq-len", type=int, dest="seq_len", help="override sequence length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsetune",
        description="Token-sparse LoRA fine-tuning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="exact score profiling over a corpus shard")
    _add_common(p)
    p.add_argument("--batches", type=int, help="number of profiled batches")

    p = sub.add_parser("tune-thresholds", help="initialize and tune layer thresholds")
    _add_common(p)
    p.add_argument("--rounds", type=int, help="tuning rounds")

    p = sub.add_parser("train-predictors", help="train sparsity-pattern predictors")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="training epochs")

    p = sub.add_parser("finetune", help="LoRA fine-tuning with predicted patterns")
    _add_common(p)
    p.add_argument("--dense", action="store_true",
                   help="run the dense LoRA baseline (no elimination)")
    p.add_argument("--retain-all", action="store_true", dest="retain_all",
                   help="run sparse machinery with thresholds at -inf")
    p.add_argument("--steps", type=int, help="override training steps")
    p.add_argument("--segments", type=int, help="override loss segment count")
    p.add_argument("--fused", action=argparse.BooleanOptionalAction, default=None,
                   help="use the permutation-free kernels (--no-fused for naive)")

    p = sub.add_parser("bench", help="kernel micro-benchmarks")
    _add_common(p)

    p = sub.add_parser("report", help="regenerate summaries from a run directory")
    p.add_argument("run_dir", nargs="?", help="run directory (defaults to --out)")
    _add_common(p)
    return parser


def _config_from(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "seq_len", None) is not None:
        cfg.seq_len = args.seq_len
    if getattr(args, "batches", None) is not None:
        cfg.sparsity.profile_batches = args.batches
    if getattr(args, "rounds", None) is not None:
        cfg.sparsity.tune_rounds = args.rounds
    if getattr(args, "epochs", None) is not None:
        cfg.predictor.epochs = args.epochs
    if getattr(args, "steps", None) is not None:
        cfg.train.steps = args.steps
    if getattr(args, "segments", None) is not None:
        cfg.kernel.segments = args.segments
    if getattr(args, "fused", None) is not None:
        cfg.kernel.fused = args.fused
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cfg_out = args.out or (RunConfig.from_file(args.config).out if args.config else None)
            run_dir = args.run_dir or cfg_out
            if run_dir is None:
                print("report: need a run directory (positional or --out/--config)",
                      file=sys.stderr)
                return 2
            summary = pipeline.run_report(run_dir)
            print(f"report written to {run_dir}/report/summary.json "
                  f"({len(summary)} fields)")
            return 0
        cfg = _config_from(args)
        if args.command == "profile":
            out = pipeline.run_profile(cfg, args.out)
            print(f"profile artifacts written to {out}")
        elif args.command == "tune-thresholds":
            ts = pipeline.run_tune_thresholds(cfg, args.out)
            print(f"tuned {len(ts.values)} thresholds")
        elif args.command == "train-predictors":
            _, history = pipeline.run_train_predictors(cfg, args.out)
            last = history[-1]
            print(f"predictors trained: loss {last.train_loss:.4g}, "
                  f"recall {last.recall:.3f}, params {last.param_count}")
        elif args.command == "finetune":
            log = pipeline.run_finetune(
                cfg, args.out, dense=args.dense, retain_all=args.retain_all)
            print(f"finetune finished: {len(log.records)} steps, "
                  f"final loss {log.records[-1].loss:.4f}")
        elif args.command == "bench":
            rows = pipeline.run_bench(cfg, args.out)
            print(f"bench wrote {len(rows)} rows")
        return 0
    except (DependencyError, DataError, LoadError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
