"""Measure how activation memory scales with retained fraction and length.

Two sweeps on the toy model, each a single instrumented training step:
  1. fixed s, retained fraction f in {1.0, 0.5, 0.25}: attention+MLP
     activation bytes should scale linearly with f,
  2. fixed f = 1, s in {256, 512, 1024, 2048}: the activation peak should be
     affine in s.

Writes plot data to --out (CSV) and prints the fits.

Usage:
    python scripts/memory_law.py --out runs/memory_law
"""

import argparse
from pathlib import Path

import numpy as np

from sparsetune import ledger as ledger_mod
from sparsetune import metrics as metrics_mod
from sparsetune import model as model_mod
from sparsetune import tensor as T


def instrumented_step(cfg, seed, tokens, source):
    led = ledger_mod.Ledger()
    with ledger_mod.use(led):
        model = model_mod.DecoderModel(cfg, seed=seed)
        loss, _ = model.forward_step(tokens, pattern_source=source)
        T.backward(loss)
    return led.report()


def block_scopes(report, n_layers):
    return report.activation_bytes(
        *[f"layer{i}.attn" for i in range(n_layers)],
        *[f"layer{i}.mlp" for i in range(n_layers)],
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/memory_law"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    cfg = model_mod.ModelConfig(max_seq_len=2048)
    rows = []
    s = 1024
    tokens = rng.integers(0, cfg.vocab_size, size=s)
    byte_points = []
    for frac in (1.0, 0.5, 0.25):
        source = model_mod.FractionSource(frac, cfg.block_size)
        report = instrumented_step(cfg, args.seed, tokens, source)
        nbytes = block_scopes(report, cfg.n_layers)
        byte_points.append((frac, nbytes))
        rows.append({"sweep": "fraction", "x": frac, "block_activation_bytes": nbytes,
                     "activation_peak": report.peak_by_category["activation"]})
        print(f"f={frac}: attention+MLP activation bytes {nbytes / 1e6:.2f} MB")
    slope, intercept, r2 = ledger_mod.affine_fit(
        [f for f, _ in byte_points], [float(b) for _, b in byte_points])
    print(f"bytes ~= {slope / 1e6:.2f} MB * f + {intercept / 1e6:.2f} MB (R^2={r2:.5f})")

    peak_points = []
    for s in (256, 512, 1024, 2048):
        tokens = rng.integers(0, cfg.vocab_size, size=s)
        report = instrumented_step(cfg, args.seed, tokens, None)
        peak = report.peak_by_category["activation"]
        peak_points.append((s, peak))
        rows.append({"sweep": "length", "x": s, "block_activation_bytes":
                     block_scopes(report, cfg.n_layers), "activation_peak": peak})
        print(f"s={s}: activation peak {peak / 1e6:.2f} MB")
    slope, intercept, r2 = ledger_mod.affine_fit(
        [float(s) for s, _ in peak_points], [float(p) for _, p in peak_points])
    print(f"peak ~= {slope:.0f} B/token * s + {intercept / 1e6:.2f} MB (R^2={r2:.5f})")

    args.out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_rows_csv(args.out / "memory_law.csv", rows)
    print(f"wrote {args.out / 'memory_law.csv'}")


if __name__ == "__main__":
    main()
