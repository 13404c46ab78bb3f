import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparsetune import ledger as ledger_mod
from sparsetune.config import RunConfig
from sparsetune.model import DecoderModel, ModelConfig


@pytest.fixture
def fresh_ledger():
    led = ledger_mod.Ledger()
    with ledger_mod.use(led):
        yield led


def tiny_config(**overrides) -> ModelConfig:
    base = dict(n_layers=2, hidden_dim=32, n_heads=4, vocab_size=64,
                max_seq_len=64, mlp_dim=64, block_size=8, lora_rank=4,
                lora_alpha=4.0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, **overrides) -> DecoderModel:
    return DecoderModel(tiny_config(**overrides), seed=seed)


@pytest.fixture
def word_corpus(tmp_path) -> Path:
    rng = np.random.default_rng(42)
    words = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran", "fast",
             "tree", "house", "blue", "sky", "sun", "moon", "star"]
    text = " ".join(rng.choice(words, size=12000))
    path = tmp_path / "corpus.txt"
    path.write_text(text)
    return path


def small_run_config(corpus: Path, out: Path, **train_overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.model = tiny_config(vocab_size=256)
    cfg.corpus = str(corpus)
    cfg.out = str(out)
    cfg.seq_len = 64
    cfg.sparsity.profile_batches = 4
    cfg.predictor.r1 = cfg.predictor.r2 = cfg.predictor.d_pred = 8
    cfg.predictor.epochs = 30
    cfg.predictor.teacher_batches = 8
    cfg.predictor.val_batches = 2
    cfg.train.steps = 10
    cfg.train.eval_every = 5
    cfg.train.eval_batches = 2
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg
