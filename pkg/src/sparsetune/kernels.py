"""Execution-level optimizations: permutation-free token movement and
segment-based loss-gradient peak cutting.

Each optimization ships next to a naive reference implementation so
equivalence and allocation behavior can be compared directly.  The naive
attention path materializes a gathered input buffer, the attention output,
and a zero-padded output buffer (three transient, ledger-tagged buffers per
call); the fused path indexes the selected tokens through the plan and
accumulates the attention output straight into the residual stream, leaving
a single transient buffer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ledger as ledger_mod
from . import tensor as T
from .errors import ContractError


@dataclass(frozen=True)
class GatherPlan:
    """Sorted retained token indices within a sequence of length n_tokens."""

    indices: np.ndarray
    n_tokens: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise ContractError("plan indices must be one-dimensional")
        if idx.size:
            if (np.diff(idx) <= 0).any():
                raise ContractError("plan indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.n_tokens:
                raise ContractError(
                    f"plan indices out of range [0, {self.n_tokens})"
                )

    @property
    def k(self) -> int:
        return int(self.indices.size)

    @staticmethod
    def full(n_tokens: int) -> "GatherPlan":
        return GatherPlan(np.arange(n_tokens, dtype=np.int64), n_tokens)

    @staticmethod
    def empty(n_tokens: int) -> "GatherPlan":
        return GatherPlan(np.empty(0, dtype=np.int64), n_tokens)


@dataclass(frozen=True)
class SegmentPlan:
    """Contiguous partition of [0, n_tokens) into non-empty segments."""

    n_tokens: int
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0 or b[-1] != self.n_tokens:
            raise ContractError(f"boundaries must span [0, {self.n_tokens}], got {b}")
        if any(b[i + 1] <= b[i] for i in range(len(b) - 1)):
            raise ContractError(f"every segment must be non-empty, got {b}")

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def segments(self) -> list[tuple[int, int]]:
        return [(self.boundaries[i], self.boundaries[i + 1]) for i in range(self.n_segments)]

    @staticmethod
    def even(n_tokens: int, n_segments: int) -> "SegmentPlan":
        if n_segments < 1 or n_segments > n_tokens:
            raise ContractError(
                f"cannot split {n_tokens} tokens into {n_segments} non-empty segments"
            )
        edges = [round(i * n_tokens / n_segments) for i in range(n_segments + 1)]
        return SegmentPlan(n_tokens, tuple(edges))


# ---------------------------------------------------------------------------
# shared attention / MLP cores


def _project(xn: T.Tensor, weight: T.Tensor, adapter) -> T.Tensor:
    out = T.matmul(xn, weight)
    if adapter is not None:
        delta = T.matmul(T.matmul(xn, adapter.a), adapter.b)
        out = T.add(out, T.scale(delta, adapter.scaling))
    return out


def attention_core(xn: T.Tensor, positions: np.ndarray, layer) -> T.Tensor:
    """Projections + rotary encoding + causal attention + output projection.

    positions carry the retained tokens' original indices, so elimination
    never shifts positional semantics.
    """
    q = _project(xn, layer.wq, layer.lora_q)
    k = _project(xn, layer.wk, None)
    v = _project(xn, layer.wv, layer.lora_v)
    if layer.rope:
        q = T.rope_rotate(q, positions, layer.n_heads, layer.rope_base)
        k = T.rope_rotate(k, positions, layer.n_heads, layer.rope_base)
    att = T.causal_attention(q, k, v, layer.n_heads)
    return T.matmul(att, layer.wo)


def mlp_core(xn: T.Tensor, layer) -> T.Tensor:
    if layer.mlp_variant == "silu":
        inner = T.mul(T.silu(T.matmul(xn, layer.w_gate)), T.matmul(xn, layer.w_up))
    else:
        inner = T.relu(T.matmul(xn, layer.w_up))
    return T.matmul(inner, layer.w_down)


# ---------------------------------------------------------------------------
# sparse attention kernels


def sparse_attention_naive(x: T.Tensor, plan: GatherPlan, layer) -> T.Tensor:
    """Gather-compute-pad-add with explicitly materialized buffers."""
    if plan.n_tokens != x.shape[0]:
        raise ContractError(f"plan covers {plan.n_tokens} tokens, input has {x.shape[0]}")
    if plan.k == 0:
        return x
    led = ledger_mod.get()
    idx = plan.indices
    gathered = T.gather_rows(x, idx)
    h_gather = led.alloc(gathered.nbytes, ledger_mod.TRANSIENT, op="gathered_input")
    xn = T.rmsnorm(gathered, layer.attn_norm_w)
    out_small = attention_core(xn, idx, layer)
    h_small = led.alloc(out_small.nbytes, ledger_mod.TRANSIENT, op="attn_out")
    padded = T.scatter_rows(out_small, idx, plan.n_tokens)
    h_pad = led.alloc(padded.nbytes, ledger_mod.TRANSIENT, op="padded_out")
    out = T.add(x, padded)
    led.free(h_pad, op="padded_out")
    led.free(h_small, op="attn_out")
    led.free(h_gather, op="gathered_input")
    return out


def sparse_attention_fused(
    x: T.Tensor, plan: GatherPlan, layer, fuse_projections: bool = True
) -> T.Tensor:
    """Permutation-free path: selected tokens are loaded directly through the
    plan and the attention output is accumulated in place into the residual
    stream, completing padding and residual addition in a single step."""
    if plan.n_tokens != x.shape[0]:
        raise ContractError(f"plan covers {plan.n_tokens} tokens, input has {x.shape[0]}")
    if plan.k == 0:
        return x
    led = ledger_mod.get()
    idx = plan.indices
    handles = []
    if fuse_projections:
        xn = T.gather_rmsnorm(x, idx, layer.attn_norm_w)
    else:
        gathered = T.gather_rows(x, idx)
        handles.append(led.alloc(gathered.nbytes, ledger_mod.TRANSIENT, op="gathered_input"))
        xn = T.rmsnorm(gathered, layer.attn_norm_w)
    out_small = attention_core(xn, idx, layer)
    handles.append(led.alloc(out_small.nbytes, ledger_mod.TRANSIENT, op="attn_out"))
    out = T.scatter_add_rows(x, out_small, idx)
    for h in reversed(handles):
        led.free(h)
    return out


def sparse_mlp_naive(x: T.Tensor, plan: GatherPlan, layer) -> T.Tensor:
    if plan.n_tokens != x.shape[0]:
        raise ContractError(f"plan covers {plan.n_tokens} tokens, input has {x.shape[0]}")
    if plan.k == 0:
        return x
    led = ledger_mod.get()
    idx = plan.indices
    gathered = T.gather_rows(x, idx)
    h_gather = led.alloc(gathered.nbytes, ledger_mod.TRANSIENT, op="gathered_input")
    xn = T.rmsnorm(gathered, layer.mlp_norm_w)
    out_small = mlp_core(xn, layer)
    h_small = led.alloc(out_small.nbytes, ledger_mod.TRANSIENT, op="mlp_out")
    padded = T.scatter_rows(out_small, idx, plan.n_tokens)
    h_pad = led.alloc(padded.nbytes, ledger_mod.TRANSIENT, op="padded_out")
    out = T.add(x, padded)
    led.free(h_pad, op="padded_out")
    led.free(h_small, op="mlp_out")
    led.free(h_gather, op="gathered_input")
    return out


def sparse_mlp_fused(
    x: T.Tensor, plan: GatherPlan, layer, fuse_projections: bool = True
) -> T.Tensor:
    if plan.n_tokens != x.shape[0]:
        raise ContractError(f"plan covers {plan.n_tokens} tokens, input has {x.shape[0]}")
    if plan.k == 0:
        return x
    led = ledger_mod.get()
    idx = plan.indices
    handles = []
    if fuse_projections:
        xn = T.gather_rmsnorm(x, idx, layer.mlp_norm_w)
    else:
        gathered = T.gather_rows(x, idx)
        handles.append(led.alloc(gathered.nbytes, ledger_mod.TRANSIENT, op="gathered_input"))
        xn = T.rmsnorm(gathered, layer.mlp_norm_w)
    out_small = mlp_core(xn, layer)
    handles.append(led.alloc(out_small.nbytes, ledger_mod.TRANSIENT, op="mlp_out"))
    out = T.scatter_add_rows(x, out_small, idx)
    for h in reversed(handles):
        led.free(h)
    return out


# ---------------------------------------------------------------------------
# segment-based loss-gradient computation


def segmented_loss_and_grad(
    hidden: T.Tensor,
    lm_head: T.Tensor,
    targets: np.ndarray,
    plan: SegmentPlan,
    ignore_index: int = -1,
) -> T.Tensor:
    """Mean token cross entropy computed one segment at a time.

    Per-segment logits and probabilities are transient: they are dropped as
    soon as the segment's gradient contribution has been accumulated, so at
    no time are logits for more than one segment live.  Token weighting is
    identical to the unsegmented computation (a single global mean).
    """
    targets = np.asarray(targets)
    n = hidden.shape[0]
    if targets.shape != (n,):
        raise ContractError(f"targets shape {targets.shape} does not match {n} tokens")
    if plan.n_tokens != n:
        raise ContractError(f"segment plan covers {plan.n_tokens} tokens, input has {n}")
    led = ledger_mod.get()
    hd, wd = hidden.data, lm_head.data
    need_w_grad = lm_head.requires_grad
    grad_hidden = np.zeros_like(hd)
    grad_w = np.zeros_like(wd) if need_w_grad else None
    loss_sum = 0.0
    count = 0
    for a, b in plan.segments:
        hseg = hd[a:b]
        tseg = targets[a:b]
        logits = hseg @ wd
        h_logits = led.alloc(logits.nbytes, ledger_mod.TRANSIENT, op="segment_logits")
        seg_sum, valid, probs = T._ce_terms(logits, tseg, ignore_index)
        h_probs = led.alloc(probs.nbytes, ledger_mod.TRANSIENT, op="segment_probs")
        loss_sum += seg_sum
        count += int(valid.sum())
        rows = np.arange(logits.shape[0])
        dlogits = probs
        dlogits[rows[valid], tseg[valid]] -= 1.0
        dlogits[~valid] = 0.0
        grad_hidden[a:b] = dlogits @ wd.T
        if need_w_grad:
            grad_w += hseg.T @ dlogits
        led.free(h_probs, op="segment_probs")
        led.free(h_logits, op="segment_logits")
    if count == 0:
        raise ContractError("segmented loss: no valid targets")
    grad_hidden /= count
    if need_w_grad:
        grad_w /= count
    saved = (grad_hidden,) if grad_w is None else (grad_hidden, grad_w)

    def bw(g):
        gh = g * grad_hidden
        return (gh, g * grad_w if need_w_grad else None)

    return T.custom_op(
        np.asarray(loss_sum / count), "segmented_cross_entropy",
        (hidden, lm_head), saved, bw,
    )


# ---------------------------------------------------------------------------
# benchmarking


class _BenchLayer:
    """Minimal frozen layer for kernel benchmarks."""

    def __init__(self, rng: np.random.Generator, h: int, n_heads: int, mlp_dim: int, dtype=np.float32):
        std = 1.0 / np.sqrt(h)
        def w(rows, cols):
            return T.Tensor((rng.standard_normal((rows, cols)) * std).astype(dtype))
        self.wq, self.wk, self.wv, self.wo = (w(h, h) for _ in range(4))
        self.attn_norm_w = T.Tensor(np.ones(h, dtype=dtype))
        self.mlp_norm_w = T.Tensor(np.ones(h, dtype=dtype))
        self.w_gate = w(h, mlp_dim)
        self.w_up = w(h, mlp_dim)
        self.w_down = w(mlp_dim, h)
        self.lora_q = None
        self.lora_v = None
        self.n_heads = n_heads
        self.rope = True
        self.rope_base = 10000.0
        self.mlp_variant = "silu"


_BENCH_KERNELS = {
    "attn_naive": lambda x, plan, layer: sparse_attention_naive(x, plan, layer),
    "attn_fused": lambda x, plan, layer: sparse_attention_fused(x, plan, layer),
    "attn_fused_noproj": lambda x, plan, layer: sparse_attention_fused(
        x, plan, layer, fuse_projections=False
    ),
}


def bench_kernels(
    sizes=(64, 128, 256),
    seeds=(0, 1, 2),
    retained_fracs=(0.0, 0.25, 0.5, 1.0),
    segment_counts=(1, 2, 4, 8),
    h: int = 64,
    n_heads: int = 4,
    vocab: int = 256,
    repeats: int = 3,
) -> list[dict]:
    """Wall-time and allocation comparison of fused vs naive kernels.

    One row per (kernel, size, plan) combination; times are the median over
    seeds x repeats after a warmup call.
    """
    rows: list[dict] = []
    for s in sizes:
        for frac in retained_fracs:
            k = int(round(s * frac))
            times: dict[str, list[int]] = {name: [] for name in _BENCH_KERNELS}
            allocs: dict[str, tuple[int, int, int]] = {}
            for seed in seeds:
                rng = np.random.default_rng(seed)
                layer = _BenchLayer(rng, h, n_heads, 4 * h)
                x = T.Tensor(rng.standard_normal((s, h)).astype(np.float32))
                if k == 0:
                    plan = GatherPlan.empty(s)
                elif k == s:
                    plan = GatherPlan.full(s)
                else:
                    plan = GatherPlan(np.sort(rng.choice(s, size=k, replace=False)), s)
                for name, fn in _BENCH_KERNELS.items():
                    fn(x, plan, layer)  # warmup
                    led = ledger_mod.Ledger(keep_series=False)
                    with ledger_mod.use(led):
                        t0 = time.perf_counter_ns()
                        for _ in range(repeats):
                            fn(x, plan, layer)
                        elapsed = time.perf_counter_ns() - t0
                    times[name].append(elapsed // repeats)
                    allocs[name] = (
                        led.total_alloc_by_category[ledger_mod.TRANSIENT] // repeats,
                        led.alloc_events_by_category[ledger_mod.TRANSIENT] // repeats,
                        led.peak_total,
                    )
            for name in _BENCH_KERNELS:
                transient_bytes, transient_buffers, peak = allocs[name]
                rows.append({
                    "kernel": name,
                    "s": s,
                    "k_or_n": k,
                    "wall_ns": int(np.median(times[name])),
                    "transient_bytes": transient_bytes,
                    "transient_buffers": transient_buffers,
                    "peak_bytes": peak,
                })
    # segmented-loss benchmark rows
    for s in sizes:
        for n_seg in segment_counts:
            if n_seg > s:
                continue
            seg_times = []
            seg_alloc = (0, 0, 0)
            for seed in seeds:
                rng = np.random.default_rng(seed)
                hidden = T.Tensor(rng.standard_normal((s, h)).astype(np.float32))
                head = T.Tensor((rng.standard_normal((h, vocab)) / np.sqrt(h)).astype(np.float32))
                targets = rng.integers(0, vocab, size=s)
                plan = SegmentPlan.even(s, n_seg)
                segmented_loss_and_grad(hidden, head, targets, plan)  # warmup
                led = ledger_mod.Ledger(keep_series=False)
                with ledger_mod.use(led):
                    t0 = time.perf_counter_ns()
                    for _ in range(repeats):
                        segmented_loss_and_grad(hidden, head, targets, plan)
                    elapsed = time.perf_counter_ns() - t0
                seg_times.append(elapsed // repeats)
                seg_alloc = (
                    led.total_alloc_by_category[ledger_mod.TRANSIENT] // repeats,
                    led.alloc_events_by_category[ledger_mod.TRANSIENT] // repeats,
                    led.peak_total,
                )
            rows.append({
                "kernel": "loss_segmented",
                "s": s,
                "k_or_n": n_seg,
                "wall_ns": int(np.median(seg_times)),
                "transient_bytes": seg_alloc[0],
                "transient_buffers": seg_alloc[1],
                "peak_bytes": seg_alloc[2],
            })
    return rows
