import numpy as np

from sparsetune import data, pipeline

from conftest import tiny_model


def test_train_predictors_entry_point(word_corpus):
    model = tiny_model(vocab_size=256)
    seqs = data.load_corpus(word_corpus, 64)
    train, val = data.split_shards(seqs[:10], 0.2)
    pairs, history = pipeline.train_predictors(
        model, train, epochs=15, lr=1e-2, val_shard=val)
    assert set(pairs) == {0, 1}
    assert len(history) == 15
    assert np.isfinite(history[-1].train_loss)
    assert history[-1].param_count > 0
