"""Benchmark the permutation-free kernels against the naive implementations.

Usage:
    python scripts/bench_kernels.py --out runs/bench [--sizes 64 128 256 512]
"""

import argparse
from pathlib import Path

from sparsetune import kernels
from sparsetune import metrics as metrics_mod


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    rows = kernels.bench_kernels(sizes=tuple(args.sizes), seeds=tuple(args.seeds))
    args.out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_rows_csv(args.out / "bench.csv", rows)

    naive = {(r["s"], r["k_or_n"]): r for r in rows if r["kernel"] == "attn_naive"}
    print(f"{'s':>5} {'k':>5} {'naive us':>9} {'fused us':>9} {'speedup':>8} "
          f"{'transient naive':>16} {'fused':>10}")
    for row in rows:
        if row["kernel"] != "attn_fused":
            continue
        ref = naive[(row["s"], row["k_or_n"])]
        speedup = ref["wall_ns"] / max(row["wall_ns"], 1)
        print(f"{row['s']:>5} {row['k_or_n']:>5} {ref['wall_ns'] / 1e3:>9.1f} "
              f"{row['wall_ns'] / 1e3:>9.1f} {speedup:>8.2f} "
              f"{ref['transient_bytes']:>16} {row['transient_bytes']:>10}")
    print(f"\nwrote {args.out / 'bench.csv'}")


if __name__ == "__main__":
    main()
