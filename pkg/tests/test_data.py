import numpy as np
import pytest

from sparsetune import data
from sparsetune.errors import ContractError, DataError


def test_byte_tokenizer_identity():
    assert np.array_equal(data.encode_bytes("ab"), [97, 98])
    assert data.decode_bytes(np.array([104, 105])) == b"hi"


def test_chunking_arithmetic(tmp_path):
    s = 32
    path = tmp_path / "c.txt"
    path.write_bytes(bytes(range(64)) * 5)  # exactly 10*s bytes
    seqs = data.load_corpus(path, s)
    assert len(seqs) == 10
    # non-overlapping
    for i, (inputs, _) in enumerate(seqs):
        assert inputs[0] == (i * s) % 64


def test_targets_are_next_token(tmp_path):
    s = 8
    path = tmp_path / "c.bin"
    path.write_bytes(bytes(range(16)))
    seqs = data.load_corpus(path, s)
    inputs, targets = seqs[0]
    assert np.array_equal(targets[:-1], inputs[1:])
    assert targets[-1] == 8  # next chunk's first byte
    _, targets_last = seqs[-1]
    assert targets_last[-1] == data.IGNORE_INDEX  # nothing after the corpus


def test_short_corpus_pads_single_sequence(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text("abc")
    seqs = data.load_corpus(path, 8)
    assert len(seqs) == 1
    inputs, targets = seqs[0]
    assert np.array_equal(inputs[:3], [97, 98, 99])
    assert np.all(inputs[3:] == data.PAD_TOKEN)
    assert np.all(targets[2:] == data.IGNORE_INDEX)


def test_empty_corpus_rejected(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("")
    with pytest.raises(ContractError):
        data.load_corpus(path, 8)


def test_id_file_tokenizer(tmp_path):
    path = tmp_path / "ids.txt"
    path.write_text("1\n2\n3\n4\n5\n6\n7\n8\n")
    seqs = data.load_corpus(path, 4, vocab_size=16, tokenizer="ids")
    assert len(seqs) == 2
    assert np.array_equal(seqs[0][0], [1, 2, 3, 4])


def test_id_file_out_of_vocab_names_line(tmp_path):
    path = tmp_path / "ids.txt"
    path.write_text("1\n2\n99\n")
    with pytest.raises(DataError) as err:
        data.load_corpus(path, 2, vocab_size=16, tokenizer="ids")
    assert ":3:" in str(err.value)


def test_split_shards_deterministic():
    seqs = [(np.arange(4) + i, np.arange(4)) for i in range(10)]
    train, evals = data.split_shards(seqs, eval_fraction=0.2)
    assert len(train) == 8 and len(evals) == 2
    assert evals[0][0][0] == 8
