"""Exact token informativeness, block-wise elimination, and threshold tuning.

Scores follow the positive-only head aggregation: for tokens i, j the
aggregated pre-softmax score is sum over heads of max(S_ij^h, 0) divided by
the head count, restricted to causally valid pairs (i >= j).  A score
block's informativeness is the maximum aggregated entry in its tile; a
token block's informativeness is the column sum of score blocks above it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ledger as ledger_mod
from .errors import ContractError

ATTENTION = "attention"
MLP = "mlp"
COMPONENTS = (ATTENTION, MLP)

NEG_INF = float("-inf")


def n_blocks_for(n_tokens: int, block_size: int) -> int:
    return -(-n_tokens // block_size)


def tri_size(n_blocks: int) -> int:
    return n_blocks * (n_blocks + 1) // 2


def tri_index(m: int, n: int) -> int:
    """Packed index of score block (query block m, key block n), n <= m."""
    return m * (m + 1) // 2 + n


@dataclass
class BlockScoreMatrix:
    """Lower-triangular informativeness scores over (query, key) block pairs."""

    n_blocks: int
    block_size: int
    scores: np.ndarray  # packed lower triangle, length tri_size(n_blocks)
    layer_id: int = 0
    component: str = ATTENTION

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (tri_size(self.n_blocks),):
            raise ContractError(
                f"packed triangle length {self.scores.shape} does not match "
                f"{self.n_blocks} blocks"
            )
        if self.scores.size and self.scores.min() < 0:
            raise ContractError("block scores must be nonnegative")

    def get(self, m: int, n: int) -> float:
        if n > m:
            raise ContractError(f"block ({m},{n}) is above the causal diagonal")
        return float(self.scores[tri_index(m, n)])

    def as_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_blocks, self.n_blocks))
        m, n = np.tril_indices(self.n_blocks)
        dense[m, n] = self.scores
        return dense


@dataclass(frozen=True)
class SparsityPattern:
    """Retained token blocks for one (layer, component)."""

    layer_id: int
    component: str
    retained_blocks: tuple[int, ...]
    block_size: int
    n_tokens: int

    def __post_init__(self):
        blocks = self.retained_blocks
        if list(blocks) != sorted(set(blocks)):
            raise ContractError("retained blocks must be sorted and unique")
        if blocks and (blocks[0] < 0 or blocks[-1] >= self.n_blocks):
            raise ContractError(
                f"retained blocks out of range [0, {self.n_blocks})"
            )

    @property
    def n_blocks(self) -> int:
        return n_blocks_for(self.n_tokens, self.block_size)

    @property
    def token_indices(self) -> np.ndarray:
        b = self.block_size
        chunks = [
            np.arange(n * b, min((n + 1) * b, self.n_tokens))
            for n in self.retained_blocks
        ]
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks).astype(np.int64)

    @property
    def retained_fraction(self) -> float:
        return len(self.token_indices) / self.n_tokens

    @staticmethod
    def full(n_tokens: int, block_size: int, layer_id: int = 0, component: str = ATTENTION) -> "SparsityPattern":
        nb = n_blocks_for(n_tokens, block_size)
        return SparsityPattern(layer_id, component, tuple(range(nb)), block_size, n_tokens)

    @staticmethod
    def empty(n_tokens: int, block_size: int, layer_id: int = 0, component: str = ATTENTION) -> "SparsityPattern":
        return SparsityPattern(layer_id, component, (), block_size, n_tokens)


@dataclass
class ThresholdSet:
    """One threshold per (layer, component), plus tuning hyperparameters."""

    values: dict[tuple[int, str], float] = field(default_factory=dict)
    eps: float | None = None
    eta: float | None = None
    config_hash: str = ""

    def get(self, layer_id: int, component: str) -> float:
        return self.values[(layer_id, component)]

    def set(self, layer_id: int, component: str, value: float) -> None:
        self.values[(layer_id, component)] = value

    def copy(self) -> "ThresholdSet":
        return ThresholdSet(dict(self.values), self.eps, self.eta, self.config_hash)

    def to_dict(self) -> dict:
        return {
            "values": {f"{layer}:{comp}": v for (layer, comp), v in sorted(self.values.items())},
            "eps": self.eps,
            "eta": self.eta,
            "config_hash": self.config_hash,
        }

    @staticmethod
    def from_dict(d: dict) -> "ThresholdSet":
        values = {}
        for key, v in d["values"].items():
            layer, comp = key.split(":")
            values[(int(layer), comp)] = float(v)
        return ThresholdSet(values, d.get("eps"), d.get("eta"), d.get("config_hash", ""))


# ---------------------------------------------------------------------------
# exact scoring


def _as_heads(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    if q.ndim == 2:
        q = q[None]
    if q.ndim != 3:
        raise ContractError(f"expected [heads, s, d] scores input, got shape {q.shape}")
    return q


def _aggregate_heads(scores: np.ndarray, n_heads: int) -> np.ndarray:
    """Positive-only sum across heads scaled by the head count."""
    return np.maximum(scores, 0.0).sum(axis=0) / n_heads


def exact_block_scores(
    q: np.ndarray,
    k: np.ndarray,
    block_size: int,
    *,
    n_valid: int | None = None,
    layer_id: int = 0,
    component: str = ATTENTION,
) -> BlockScoreMatrix:
    """Block informativeness computed one query-block row strip at a time.

    The full s x s score matrix is never materialized: per query block the
    strip of tiles up to the diagonal is formed, head-aggregated, masked and
    max-reduced, then discarded.  Peak auxiliary memory is therefore linear
    in sequence length at a fixed block size.
    """
    q = _as_heads(q)
    k = _as_heads(k)
    if q.shape != k.shape:
        raise ContractError(f"q/k shapes differ: {q.shape} vs {k.shape}")
    n_heads, s, _ = q.shape
    if block_size > s:
        raise ContractError(f"block size {block_size} exceeds sequence length {s}")
    if n_valid is None:
        n_valid = s
    nb = n_blocks_for(s, block_size)
    out = np.zeros(tri_size(nb))
    led = ledger_mod.get()
    with led.scope("block_scores"):
        for m in range(nb):
            r0, r1 = m * block_size, min((m + 1) * block_size, s)
            limit = r1
            strip = q[:, r0:r1] @ k[:, :limit].transpose(0, 2, 1)  # [H, rows, limit]
            h_strip = led.alloc(strip.nbytes, ledger_mod.TRANSIENT, op="score_strip")
            agg = _aggregate_heads(strip, n_heads)  # [rows, limit]
            h_agg = led.alloc(agg.nbytes, ledger_mod.TRANSIENT, op="score_agg")
            rows = np.arange(r0, r1)[:, None]
            cols = np.arange(limit)[None, :]
            keep = (cols <= rows) & (rows < n_valid) & (cols < n_valid)
            agg = np.where(keep, agg, 0.0)
            for n in range(m + 1):
                c0, c1 = n * block_size, min((n + 1) * block_size, limit)
                tile = agg[:, c0:c1]
                out[tri_index(m, n)] = tile.max() if tile.size else 0.0
            led.free(h_agg, op="score_agg")
            led.free(h_strip, op="score_strip")
    return BlockScoreMatrix(nb, block_size, out, layer_id=layer_id, component=component)


def token_informativeness(
    q: np.ndarray,
    k: np.ndarray,
    *,
    n_valid: int | None = None,
    row_tile: int = 64,
) -> np.ndarray:
    """Per-token informativeness: column sums of aggregated scores.

    The sum runs over causally valid queries i >= j excluding i == j, so a
    single-token sequence and the final token both score zero.
    """
    q = _as_heads(q)
    k = _as_heads(k)
    if q.shape != k.shape:
        raise ContractError(f"q/k shapes differ: {q.shape} vs {k.shape}")
    n_heads, s, _ = q.shape
    if n_valid is None:
        n_valid = s
    info = np.zeros(s)
    for r0 in range(0, n_valid, row_tile):
        r1 = min(r0 + row_tile, n_valid)
        strip = q[:, r0:r1] @ k[:, :r1].transpose(0, 2, 1)
        agg = _aggregate_heads(strip, n_heads)
        rows = np.arange(r0, r1)[:, None]
        cols = np.arange(r1)[None, :]
        keep = (cols < rows) & (cols < n_valid)  # strictly below diagonal
        info[:r1] += np.where(keep, agg, 0.0).sum(axis=0)
    return info


def token_block_scores(matrix: BlockScoreMatrix) -> np.ndarray:
    """Token-block informativeness: sum of score blocks down each column."""
    nb = matrix.n_blocks
    out = np.zeros(nb)
    for m in range(nb):
        base = tri_index(m, 0)
        out[: m + 1] += matrix.scores[base : base + m + 1]
    return out


def eliminate(
    block_scores: np.ndarray,
    threshold: float,
    *,
    layer_id: int = 0,
    component: str = ATTENTION,
    block_size: int,
    n_tokens: int,
    force_blocks: Sequence[int] = (),
) -> SparsityPattern:
    """Retain every block whose informativeness meets the threshold."""
    block_scores = np.asarray(block_scores, dtype=np.float64)
    if block_scores.size and not np.isfinite(block_scores).all():
        raise ContractError("block scores must be finite")
    retained = set(np.nonzero(block_scores >= threshold)[0].tolist())
    retained.update(int(b) for b in force_blocks)
    return SparsityPattern(
        layer_id, component, tuple(sorted(retained)), block_size, n_tokens
    )


def mlp_token_informativeness(inner: np.ndarray, *, n_valid: int | None = None) -> np.ndarray:
    """Mean absolute inner activation per token (rows past n_valid score 0)."""
    inner = np.asarray(inner)
    scores = np.abs(inner).mean(axis=-1).astype(np.float64)
    if n_valid is not None:
        scores[n_valid:] = 0.0
    return scores


def mlp_block_scores(token_scores: np.ndarray, block_size: int, *, n_valid: int | None = None) -> np.ndarray:
    """Block score = max token score in the block, mirroring the tile max."""
    token_scores = np.asarray(token_scores, dtype=np.float64)
    s = token_scores.shape[0]
    if n_valid is None:
        n_valid = s
    nb = n_blocks_for(s, block_size)
    out = np.zeros(nb)
    for n in range(nb):
        t0, t1 = n * block_size, min((n + 1) * block_size, s, n_valid)
        if t1 > t0:
            out[n] = token_scores[t0:t1].max()
    return out


def attention_score_ratio(
    q: np.ndarray,
    k: np.ndarray,
    frac: float,
    *,
    n_valid: int | None = None,
    row_tile: int = 64,
) -> float:
    """Sparsity ratio of the aggregated attention scores, streamed.

    Two passes over row strips (max, then count) so the full score matrix is
    never materialized.  Returns NaN when the maximum is not positive, since
    the ratio is undefined for an all-zero score map.
    """
    if not (0.0 < frac < 1.0):
        raise ContractError(f"frac must lie in (0, 1), got {frac}")
    q = _as_heads(q)
    k = _as_heads(k)
    n_heads, s, _ = q.shape
    if n_valid is None:
        n_valid = s
    def strips():
        for r0 in range(0, n_valid, row_tile):
            r1 = min(r0 + row_tile, n_valid)
            strip = q[:, r0:r1] @ k[:, :r1].transpose(0, 2, 1)
            agg = _aggregate_heads(strip, n_heads)
            rows = np.arange(r0, r1)[:, None]
            cols = np.arange(r1)[None, :]
            keep = (cols <= rows) & (cols < n_valid)
            yield agg[keep]
    max_score = 0.0
    total = 0
    for vals in strips():
        total += vals.size
        if vals.size:
            max_score = max(max_score, float(vals.max()))
    if total == 0:
        raise ContractError("no unmasked score entries")
    if max_score <= 0.0:
        return float("nan")
    cutoff = frac * max_score
    below = sum(int((vals < cutoff).sum()) for vals in strips())
    return below / total


# ---------------------------------------------------------------------------
# layer-specific thresholds


ProfileLike = Mapping[tuple[int, str], Sequence]


def init_thresholds(profile: ProfileLike, config_hash: str = "") -> ThresholdSet:
    """Step 1: threshold = pooled mean of observed token-block scores."""
    if not profile:
        raise ContractError("empty profile")
    ts = ThresholdSet(config_hash=config_hash)
    for key, batches in profile.items():
        if not batches:
            raise ContractError(f"no profiled batches for {key}")
        pooled = []
        for item in batches:
            vec = token_block_scores(item) if isinstance(item, BlockScoreMatrix) else np.asarray(item, dtype=np.float64)
            pooled.append(vec.reshape(-1))
        all_scores = np.concatenate(pooled)
        if all_scores.size == 0:
            raise ContractError(f"no scores observed for {key}")
        ts.values[key] = float(all_scores.mean())
    return ts


def tune_thresholds(
    acc_fn: Callable[[ThresholdSet], float],
    thresholds: ThresholdSet,
    *,
    eps: float | None = None,
    eta: float | None = None,
    rounds: int = 1,
) -> ThresholdSet:
    """Step 2: per-threshold finite-difference ascent on the accuracy proxy.

    G = (acc(T + eps) - acc(T - eps)) / 2 eps, then T <- T + eta * G.  When
    eps/eta are not given, eps scales with |T| and eta is chosen so a single
    round moves the threshold by at most 10%.
    """
    tuned = thresholds.copy()
    tuned.eps = eps
    tuned.eta = eta
    for _ in range(max(rounds, 0)):
        for key in sorted(tuned.values):
            t = tuned.values[key]
            e = eps if eps is not None else 0.05 * abs(t) + 1e-3
            probe = tuned.copy()
            probe.values[key] = t + e
            acc_plus = float(acc_fn(probe))
            probe.values[key] = t - e
            acc_minus = float(acc_fn(probe))
            if not (np.isfinite(acc_plus) and np.isfinite(acc_minus)):
                raise ContractError(
                    f"non-finite accuracy while tuning {key}: "
                    f"acc(T+eps)={acc_plus}, acc(T-eps)={acc_minus}"
                )
            grad = (acc_plus - acc_minus) / (2.0 * e)
            if eta is not None:
                step = eta * grad
            else:
                auto_eta = 0.1 * (abs(t) + 1e-3) / (abs(grad) + 1e-12)
                step = auto_eta * grad
            tuned.values[key] = t + step
    return tuned


# ---------------------------------------------------------------------------
# diagnostics


def sparsity_ratio(values, frac: float) -> float:
    """Fraction of entries strictly below frac times the maximum."""
    data = np.asarray(getattr(values, "data", values), dtype=np.float64).reshape(-1)
    if data.size == 0:
        raise ContractError("sparsity_ratio over an empty tensor")
    if not (0.0 < frac < 1.0):
        raise ContractError(f"frac must lie in (0, 1), got {frac}")
    cutoff = frac * data.max()
    return float((data < cutoff).mean())
