"""Corpus ingestion: byte-level tokenization and deterministic chunking."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

PAD_TOKEN = 0
IGNORE_INDEX = -1


def encode_bytes(text: str | bytes) -> np.ndarray:
    """Byte-level tokenization: one token per byte, vocabulary of 256."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode_bytes(ids: np.ndarray) -> bytes:
    return bytes(int(i) for i in ids)


def _read_id_file(path: Path, vocab_size: int) -> np.ndarray:
    ids = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: not an integer id: {line!r}") from exc
            if value < 0 or value >= vocab_size:
                raise DataError(
                    f"{path}:{lineno}: id {value} outside vocabulary [0, {vocab_size})"
                )
            ids.append(value)
    return np.asarray(ids, dtype=np.int64)


def load_corpus(
    path: str | Path,
    seq_len: int,
    *,
    vocab_size: int = 256,
    tokenizer: str = "bytes",
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a corpus into fixed-length (inputs, targets) training sequences.

    Chunking is deterministic and non-overlapping: a file of 10*s tokens
    yields exactly 10 sequences.  Each position's target is the next token;
    positions without one (sequence tails, padding) carry IGNORE_INDEX.  A
    corpus shorter than seq_len yields a single padded sequence.
    """
    path = Path(path)
    if tokenizer == "bytes":
        ids = encode_bytes(path.read_bytes())
        if vocab_size < 256:
            raise ContractError("byte tokenizer requires vocab_size >= 256")
    elif tokenizer == "ids":
        ids = _read_id_file(path, vocab_size)
    else:
        raise ContractError(f"unknown tokenizer {tokenizer!r}")
    if ids.size == 0:
        raise ContractError(f"empty corpus: {path}")

    sequences: list[tuple[np.ndarray, np.ndarray]] = []
    n_chunks = max(1, ids.size // seq_len)
    for c in range(n_chunks):
        start = c * seq_len
        inputs = ids[start:start + seq_len]
        targets = ids[start + 1:start + seq_len + 1]
        if inputs.size < seq_len:  # corpus shorter than one sequence
            pad = seq_len - inputs.size
            inputs = np.concatenate([inputs, np.full(pad, PAD_TOKEN, dtype=np.int64)])
            targets = np.concatenate([
                targets, np.full(seq_len - targets.size, IGNORE_INDEX, dtype=np.int64)])
        elif targets.size < seq_len:  # final chunk has no next token for its tail
            targets = np.concatenate([
                targets, np.full(seq_len - targets.size, IGNORE_INDEX, dtype=np.int64)])
        sequences.append((inputs, targets.astype(np.int64)))
    return sequences


def split_shards(
    sequences: list[tuple[np.ndarray, np.ndarray]],
    eval_fraction: float = 0.1,
    min_eval: int = 1,
) -> tuple[list, list]:
    """Deterministic train/eval split: the tail of the corpus evaluates."""
    if not sequences:
        raise ContractError("no sequences to split")
    n_eval = max(min_eval, int(round(len(sequences) * eval_fraction)))
    n_eval = min(n_eval, len(sequences) - 1) if len(sequences) > 1 else 1
    if len(sequences) == 1:
        return sequences, sequences
    return sequences[:-n_eval], sequences[-n_eval:]
