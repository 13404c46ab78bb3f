"""Generate a synthetic word-soup corpus for desk-scale experiments.

Usage:
    python scripts/make_corpus.py out/corpus.txt --mb 1.0 --seed 0
"""

import argparse
from pathlib import Path

import numpy as np

WORDS = [
    "the", "cat", "sat", "on", "a", "mat", "dog", "ran", "fast", "tree",
    "house", "blue", "sky", "sun", "moon", "star", "jump", "over", "lazy",
    "quick", "brown", "fox", "and", "with", "under", "near", "river",
    "stone", "wind", "light", "dark", "morning", "evening", "walked",
    "looked", "small", "great", "old", "new", "said",
]


def make_corpus(path: Path, mb: float, seed: int) -> Path:
    rng = np.random.default_rng(seed)
    target = int(mb * 1e6)
    # Zipf-ish frequencies so byte-level models have structure to learn
    weights = 1.0 / np.arange(1, len(WORDS) + 1)
    weights /= weights.sum()
    words = []
    size = 0
    while size < target:
        batch = rng.choice(WORDS, size=4096, p=weights)
        words.extend(batch.tolist())
        size += sum(len(w) + 1 for w in batch)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(" ".join(words)[:target])
    return path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--mb", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    path = make_corpus(args.out, args.mb, args.seed)
    print(f"wrote {path} ({path.stat().st_size / 1e6:.2f} MB)")


if __name__ == "__main__":
    main()
