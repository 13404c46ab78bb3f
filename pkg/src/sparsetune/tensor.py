"""Dense tensors with a reverse-mode tape.

Only the operations the model needs are implemented.  Every op registers a
TapeNode holding explicitly saved intermediates; the memory ledger observes
those saves, so the tape is the single source of truth for which
activations are retained.  float32 is the training default, float64 is
reserved for gradient checks.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import ledger as ledger_mod
from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float32

# Masked-score sentinel: large enough that exp() underflows to exactly 0.0
# in both float32 and float64 after row-max subtraction.
NEG_INF = -1e30

# Key-tile width for the streaming attention op.
ATTN_TILE = 64

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (and hence activation retention) in the body."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded operation: inputs, saved intermediates, backward rule."""

    __slots__ = ("op", "inputs", "saved", "backward_fn", "saved_bytes", "_live")

    def __init__(
        self,
        op: str,
        inputs: tuple["Tensor", ...],
        saved: tuple[np.ndarray, ...],
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.backward_fn = backward_fn
        self.saved_bytes = sum(a.nbytes for a in saved)
        self._live = True
        led = ledger_mod.get()
        if led.enabled:
            for a in saved:
                led.retain_array(a, ledger_mod.ACTIVATION, op=op)

    def release(self) -> None:
        if not self._live:
            return
        self._live = False
        led = ledger_mod.get()
        if led.enabled:
            for a in self.saved:
                led.release_array(a, op=self.op)
        self.saved = ()
        self.inputs = ()
        self.backward_fn = None


class Tensor:
    """A dense n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "tag", "_retain_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None, tag: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.tag = tag
        self._retain_grad = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> None:
        self._retain_grad = True

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- convenience arithmetic ------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data, dtype=None, tag: str | None = None) -> Tensor:
    """A trainable leaf tensor, registered with the ledger as parameters."""
    t = Tensor(data, requires_grad=True, dtype=dtype, tag=tag)
    led = ledger_mod.get()
    if led.enabled:
        led.retain_array(t.data, ledger_mod.PARAMETERS, op=tag or "parameter")
    return t


def frozen(data, dtype=None, tag: str | None = None) -> Tensor:
    """A non-trainable leaf tensor, registered with the ledger as parameters."""
    t = Tensor(data, requires_grad=False, dtype=dtype, tag=tag)
    led = ledger_mod.get()
    if led.enabled:
        led.retain_array(t.data, ledger_mod.PARAMETERS, op=tag or "frozen")
    return t


def _record(out_data, op, inputs, saved, backward_fn) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out = Tensor(out_data)
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), tuple(saved), backward_fn)
        return out
    return Tensor(out_data)


def custom_op(out_data, op, inputs, saved, backward_fn) -> Tensor:
    """Register an externally implemented op on the tape (kernels module)."""
    return _record(out_data, op, inputs, saved, backward_fn)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed dtypes in op: {sorted(map(str, dtypes))}")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, free_tape: bool = True) -> None:
    """Reverse-mode sweep from a scalar loss.

    Saved intermediates are released (and their ledger bytes freed) as soon
    as each node's backward rule has run, unless ``free_tape`` is False.
    Gradients of non-leaf tensors are dropped unless ``retain_grad`` was set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        node = t.node
        if node is None:
            continue
        if t.grad is None:
            # Branch never contributed to the loss; still release its saves.
            if free_tape:
                node.release()
                t.node = None
            continue
        grads = node.backward_fn(t.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.dtype != inp.data.dtype:
                g = g.astype(inp.data.dtype)
            if inp.grad is None:
                inp.grad = g
            else:
                inp.grad = inp.grad + g
        if not t._retain_grad:
            t.grad = None
        if free_tape:
            node.release()
            t.node = None


def release_tape(root: Tensor) -> None:
    """Free saved intermediates of a forward pass without running backward."""
    for t in _toposort(root):
        if t.node is not None:
            t.node.release()
            t.node = None


# ---------------------------------------------------------------------------
# constructors


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")

    def bw(g):
        return g, g

    return _record(a.data + b.data, "add", (a, b), (), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, g * ad

    return _record(ad * bd, "mul", (a, b), (ad, bd), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        return (g * c,)

    return _record(a.data * c, "scale", (a,), (), bw)


def scale_cols(a: Tensor, vec: np.ndarray) -> Tensor:
    """Multiply each column j by vec[j]; vec is a constant."""
    if a.shape[-1] != vec.shape[0]:
        raise DimensionError(f"scale_cols: {a.shape} vs vec {vec.shape}")
    vec = vec.astype(a.data.dtype, copy=False)

    def bw(g):
        return (g * vec,)

    return _record(a.data * vec, "scale_cols", (a,), (vec,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, "matmul", (a, b), (ad, bd), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose expects a 2-D operand")

    def bw(g):
        return (np.ascontiguousarray(g.T),)

    return _record(np.ascontiguousarray(a.data.T), "transpose", (a,), (), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(a.data.sum()), "sum", (a,), (), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g / n, shape).astype(a.data.dtype),)

    return _record(np.asarray(a.data.mean()), "mean", (a,), (), bw)


def relu(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        return (g * (ad > 0),)

    return _record(np.maximum(ad, 0), "relu", (a,), (ad,), bw)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = sigmoid_np(ad)

    def bw(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _record(ad * s, "silu", (a,), (ad, s), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    _check_same_dtype(x, weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rmsnorm: {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    n = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    inv = inv.astype(xd.dtype)

    def bw(g):
        gw = g * wd
        dx = gw * inv - xd * (inv ** 3) * ((gw * xd).sum(axis=-1, keepdims=True) / n)
        dweight = (g * xd * inv).sum(axis=tuple(range(xd.ndim - 1)))
        return dx, dweight

    return _record(xd * inv * wd, "rmsnorm", (x, weight), (xd, inv, wd), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    td = table.data
    shape = table.shape

    def bw(g):
        dtable = np.zeros(shape, dtype=g.dtype)
        np.add.at(dtable, ids, g)
        return (dtable,)

    return _record(td[ids], "embedding_lookup", (table,), (ids,), bw)


def softmax_causal(scores: Tensor) -> Tensor:
    """Row softmax over the causal prefix of a square score matrix.

    Entries above the diagonal are treated as -inf (realized as a sentinel
    whose exp underflows to exactly zero after row-max subtraction).
    """
    sd = scores.data
    if sd.ndim != 2 or sd.shape[0] != sd.shape[1]:
        raise DimensionError(f"softmax_causal expects a square matrix, got {sd.shape}")
    n = sd.shape[0]
    masked = np.where(np.tril(np.ones((n, n), dtype=bool)), sd, sd.dtype.type(NEG_INF))
    z = masked - masked.max(axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - dot),)

    return _record(probs, "softmax_causal", (scores,), (probs,), bw)


def _ce_terms(logits: np.ndarray, targets: np.ndarray, ignore_index: int):
    """Shared forward arithmetic for both plain and segmented cross entropy.

    Returns (loss_sum over valid rows, valid row mask, probs).
    """
    valid = targets != ignore_index
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= logits.shape[1]):
        raise IndexError(
            f"target index out of range [0, {logits.shape[1]}): "
            f"min={checked.min()}, max={checked.max()}"
        )
    rowmax = logits.max(axis=-1, keepdims=True)
    z = logits - rowmax
    with np.errstate(under="ignore"):
        e = np.exp(z)
    sums = e.sum(axis=-1, keepdims=True)
    probs = e / sums
    lse = np.log(sums[:, 0]) + rowmax[:, 0]
    rows = np.arange(logits.shape[0])
    per_row = lse - logits[rows, np.where(valid, targets, 0)]
    loss_sum = per_row[valid].sum()
    return loss_sum, valid, probs


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean next-token cross entropy; rows with target == ignore_index are skipped."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}"
        )
    loss_sum, valid, probs = _ce_terms(logits.data, targets, ignore_index)
    count = int(valid.sum())
    if count == 0:
        raise ContractError("cross_entropy: no valid targets")
    ld = logits.data

    def bw(g):
        dlogits = probs.copy()
        rows = np.arange(ld.shape[0])
        dlogits[rows[valid], targets[valid]] -= 1.0
        dlogits[~valid] = 0.0
        dlogits *= g / count
        return (dlogits.astype(ld.dtype),)

    return _record(np.asarray(loss_sum / count), "cross_entropy", (logits,), (probs,), bw)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def bw(g):
        return (g * 2.0 * diff / n,)

    return _record(np.asarray((diff * diff).mean()), "mse_loss", (pred,), (diff,), bw)


# ---------------------------------------------------------------------------
# indexing ops


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)
    xd = x.data

    def bw(g):
        dx = np.zeros_like(xd)
        dx[idx] = g
        return (dx,)

    return _record(xd[idx], "gather_rows", (x,), (idx,), bw)


def scatter_rows(small: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    idx = np.asarray(idx)
    sd = small.data
    out = np.zeros((n_rows,) + sd.shape[1:], dtype=sd.dtype)
    out[idx] = sd

    def bw(g):
        return (g[idx],)

    return _record(out, "scatter_rows", (small,), (idx,), bw)


def scatter_add_rows(base: Tensor, small: Tensor, idx: np.ndarray) -> Tensor:
    """Residual accumulation: out = base with small added at the given rows.

    The base buffer is copied once (no other live view may alias the
    output), so padding and residual addition complete in a single step.
    """
    _check_same_dtype(base, small)
    idx = np.asarray(idx)
    out = base.data.copy()
    out[idx] += small.data

    def bw(g):
        return g, g[idx]

    return _record(out, "scatter_add_rows", (base, small), (idx,), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data

    def bw(g):
        dx = np.zeros_like(xd)
        dx[:, start:stop] = g
        return (dx,)

    return _record(xd[:, start:stop].copy(), "slice_cols", (x,), (), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    widths = [p.shape[1] for p in parts]

    def bw(g):
        outs = []
        off = 0
        for w in widths:
            outs.append(g[:, off:off + w])
            off += w
        return tuple(outs)

    return _record(np.concatenate([p.data for p in parts], axis=1), "concat_cols", tuple(parts), (), bw)


def gather_rmsnorm(x: Tensor, idx: np.ndarray, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """Fused row-gather + rmsnorm; only the gathered rows are saved."""
    _check_same_dtype(x, weight)
    idx = np.asarray(idx)
    xd, wd = x.data, weight.data
    xg = xd[idx]
    n = xg.shape[-1]
    inv = 1.0 / np.sqrt((xg * xg).mean(axis=-1, keepdims=True) + eps)
    inv = inv.astype(xg.dtype)
    full_shape = xd.shape

    def bw(g):
        gw = g * wd
        dxg = gw * inv - xg * (inv ** 3) * ((gw * xg).sum(axis=-1, keepdims=True) / n)
        dx = np.zeros(full_shape, dtype=g.dtype)
        dx[idx] = dxg
        dweight = (g * xg * inv).sum(axis=0)
        return dx, dweight

    return _record(xg * inv * wd, "gather_rmsnorm", (x, weight), (xg, inv, wd, idx), bw)


# ---------------------------------------------------------------------------
# positional rotation


def _rope_tables(positions: np.ndarray, half: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_rotate(x: Tensor, positions: np.ndarray, n_heads: int, base: float = 10000.0) -> Tensor:
    """Rotary position encoding using each row's original token position."""
    xd = x.data
    n, h = xd.shape
    if h % n_heads != 0:
        raise DimensionError(f"hidden dim {h} not divisible by {n_heads} heads")
    d = h // n_heads
    if d % 2 != 0:
        raise DimensionError(f"head dim {d} must be even for rotation pairs")
    half = d // 2
    positions = np.asarray(positions)
    cos, sin = _rope_tables(positions, half, base, xd.dtype)
    x3 = xd.reshape(n, n_heads, d)
    xa, xb = x3[..., :half], x3[..., half:]
    ca, sa = cos[:, None, :], sin[:, None, :]
    out = np.concatenate([xa * ca - xb * sa, xa * sa + xb * ca], axis=-1).reshape(n, h)

    def bw(g):
        g3 = g.reshape(n, n_heads, d)
        ga, gb = g3[..., :half], g3[..., half:]
        da = ga * ca + gb * sa
        db = -ga * sa + gb * ca
        return (np.concatenate([da, db], axis=-1).reshape(n, h),)

    return _record(out, "rope_rotate", (x,), (cos, sin), bw)


# ---------------------------------------------------------------------------
# streaming causal attention


def _split_heads(a: np.ndarray, n_heads: int) -> np.ndarray:
    n, h = a.shape
    return a.reshape(n, n_heads, h // n_heads).transpose(1, 0, 2)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, tile: int = ATTN_TILE) -> Tensor:
    """Multi-head causal attention computed tile-by-tile.

    Only q, k, v, the output and per-row log-sum-exp stats are saved; score
    tiles are recomputed during backward, so retained memory stays linear in
    the number of rows rather than quadratic.
    """
    _check_same_dtype(q, k, v)
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention operand shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, h = q.shape
    if n == 0:
        raise ContractError("attention over an empty sequence")
    if h % n_heads != 0:
        raise DimensionError(f"hidden dim {h} not divisible by {n_heads} heads")
    d = h // n_heads
    dt = q.data.dtype
    scale_ = dt.type(1.0 / np.sqrt(d))
    qd, kd, vd = q.data, k.data, v.data
    qh, kh, vh = (_split_heads(a, n_heads) for a in (qd, kd, vd))

    out_h = np.empty((n_heads, n, d), dtype=dt)
    lse = np.empty((n_heads, n), dtype=dt)
    with np.errstate(under="ignore"):
        for i0 in range(0, n, tile):
            i1 = min(i0 + tile, n)
            qi = qh[:, i0:i1] * scale_
            m = np.full((n_heads, i1 - i0), -np.inf, dtype=dt)
            l = np.zeros((n_heads, i1 - i0), dtype=dt)
            acc = np.zeros((n_heads, i1 - i0, d), dtype=dt)
            for j0 in range(0, i1, tile):
                j1 = min(j0 + tile, i1)
                s = qi @ kh[:, j0:j1].transpose(0, 2, 1)
                if j1 > i0:  # tile overlaps the diagonal
                    rows = np.arange(i0, i1)[:, None]
                    cols = np.arange(j0, j1)[None, :]
                    s = np.where(cols <= rows, s, dt.type(NEG_INF))
                m_new = np.maximum(m, s.max(axis=-1))
                p = np.exp(s - m_new[..., None])
                corr = np.exp(m - m_new)
                l = l * corr + p.sum(axis=-1)
                acc = acc * corr[..., None] + p @ vh[:, j0:j1]
                m = m_new
            out_h[:, i0:i1] = acc / l[..., None]
            lse[:, i0:i1] = m + np.log(l)
    out = np.ascontiguousarray(out_h.transpose(1, 0, 2).reshape(n, h))

    def bw(g):
        gh = _split_heads(g, n_heads)
        oh = _split_heads(out, n_heads)
        delta = (gh * oh).sum(axis=-1)  # [H, n]
        dq = np.zeros_like(qh)
        dk = np.zeros_like(kh)
        dv = np.zeros_like(vh)
        with np.errstate(under="ignore"):
            for i0 in range(0, n, tile):
                i1 = min(i0 + tile, n)
                qi = qh[:, i0:i1] * scale_
                gi = gh[:, i0:i1]
                di = delta[:, i0:i1, None]
                li = lse[:, i0:i1, None]
                for j0 in range(0, i1, tile):
                    j1 = min(j0 + tile, i1)
                    s = qi @ kh[:, j0:j1].transpose(0, 2, 1)
                    if j1 > i0:
                        rows = np.arange(i0, i1)[:, None]
                        cols = np.arange(j0, j1)[None, :]
                        s = np.where(cols <= rows, s, dt.type(NEG_INF))
                    p = np.exp(s - li)
                    dp = gi @ vh[:, j0:j1].transpose(0, 2, 1)
                    ds = p * (dp - di)
                    dq[:, i0:i1] += ds @ kh[:, j0:j1] * scale_
                    dk[:, j0:j1] += ds.transpose(0, 2, 1) @ qi
                    dv[:, j0:j1] += p.transpose(0, 2, 1) @ gi
        def merge(a):
            return np.ascontiguousarray(a.transpose(1, 0, 2).reshape(n, h))
        return merge(dq), merge(dk), merge(dv)

    return _record(out, "causal_attention", (q, k, v), (qd, kd, vd, out, lse), bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The function must be deterministic and must produce a scalar; 64-bit
    inputs are required so finite differences are not drowned by rounding.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires float64 inputs")
    if not x.requires_grad:
        raise ContractError("grad_check input must require grad")
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check function must return a scalar Tensor")
    backward(out)
    analytic = x.grad.copy()
    x.zero_grad()

    cd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    cd_flat = cd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(x).data)
            flat[i] = orig - eps
            f_minus = float(f(x).data)
            flat[i] = orig
            cd_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(cd)), 1e-8)
    return float((np.abs(analytic - cd) / denom).max())
