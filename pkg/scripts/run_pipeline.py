"""Run the full pipeline end to end on a synthetic corpus.

profile -> tune-thresholds -> train-predictors -> finetune (sparse) plus a
dense baseline run, then print the accuracy/memory comparison.

Usage:
    python scripts/run_pipeline.py --out runs/demo [--steps 500] [--seed 0]
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from make_corpus import make_corpus

from sparsetune import metrics as metrics_mod
from sparsetune import pipeline
from sparsetune.config import RunConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/demo"))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--warmup", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seq-len", type=int, default=512)
    ap.add_argument("--corpus", type=Path, default=None)
    args = ap.parse_args()

    corpus = args.corpus or make_corpus(args.out / "corpus.txt", 1.0, args.seed)
    cfg = RunConfig()
    cfg.corpus = str(corpus)
    cfg.out = str(args.out / "sparse")
    cfg.seq_len = args.seq_len
    cfg.model.max_seq_len = max(cfg.model.max_seq_len, args.seq_len)
    cfg.train.steps = args.steps
    cfg.train.warmup_steps = args.warmup
    cfg.train.seed = args.seed
    cfg.sparsity.tune_rounds = 12
    cfg.predictor.teacher_batches = 40
    cfg.predictor.epochs = 250

    for label, fn in (
        ("profile", pipeline.run_profile),
        ("tune-thresholds", pipeline.run_tune_thresholds),
        ("train-predictors", pipeline.run_train_predictors),
    ):
        t0 = time.time()
        fn(cfg)
        print(f"{label}: {time.time() - t0:.0f}s")

    t0 = time.time()
    pipeline.run_finetune(cfg)
    print(f"finetune (sparse): {time.time() - t0:.0f}s")
    dense_cfg = RunConfig.from_dict(cfg.to_dict())
    dense_cfg.out = str(args.out / "dense")
    t0 = time.time()
    pipeline.run_finetune(dense_cfg, dense=True)
    print(f"finetune (dense baseline): {time.time() - t0:.0f}s")

    sparse = json.loads((args.out / "sparse" / "ledger_report.json").read_text())
    dense = json.loads((args.out / "dense" / "ledger_report.json").read_text())
    gap = abs(sparse["final_eval_loss"] - dense["final_eval_loss"]) / dense["final_eval_loss"]
    print(f"\nfinal eval loss: sparse {sparse['final_eval_loss']:.4f} "
          f"dense {dense['final_eval_loss']:.4f} (relative gap {gap:.1%})")
    act_s = sparse["peak_by_category"]["activation"]
    act_d = dense["peak_by_category"]["activation"]
    print(f"activation peak: sparse {act_s / 1e6:.2f} MB vs dense {act_d / 1e6:.2f} MB "
          f"({1 - act_s / act_d:.1%} saved)")
    rows = metrics_mod.read_rows_csv(args.out / "sparse" / "metrics.csv")
    retained = {k: float(v) for k, v in rows[-1].items() if k.startswith("retained_")}
    print("retained fractions at final step:", json.dumps(retained, indent=1))
    pipeline.run_report(args.out / "sparse")
    print(f"report: {args.out / 'sparse' / 'report' / 'summary.json'}")


if __name__ == "__main__":
    main()
