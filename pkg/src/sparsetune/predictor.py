"""Low-rank sparsity-pattern predictors with elastic neuron pruning.

Each layer carries a pair of predictors (query side and key side).  A
predictor is three low-rank matrices with ReLU between successive products;
the dot products of the two predictors' block embedding outputs approximate
the layer's block informativeness scores.  During training the zero
frequency of every intermediate neuron is tracked; neurons that are most
often exactly zero are periodically masked out, shrinking the predictor
without changing what it learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparsity
from . import tensor as T
from .errors import ContractError
from .optim import Adam


@dataclass
class PredictorTrainingRecord:
    epoch: int
    train_loss: float
    recall: float
    param_count: int


class Predictor:
    """Three-matrix low-rank network producing block embedding vectors."""

    def __init__(self, w1: T.Tensor, w2: T.Tensor, w3: T.Tensor, role: str, layer_id: int):
        if w1.shape[1] != w2.shape[0] or w2.shape[1] != w3.shape[0]:
            raise ContractError(
                f"predictor matrix chain mismatch: {w1.shape} {w2.shape} {w3.shape}"
            )
        self.w1 = w1
        self.w2 = w2
        self.w3 = w3
        self.role = role
        self.layer_id = layer_id
        r1, r2 = w1.shape[1], w2.shape[1]
        self.mask1 = np.ones(r1, dtype=bool)
        self.mask2 = np.ones(r2, dtype=bool)
        self.zero_counts1 = np.zeros(r1, dtype=np.int64)
        self.zero_counts2 = np.zeros(r2, dtype=np.int64)
        self.observed = 0

    @staticmethod
    def create(rng: np.random.Generator, h: int, r1: int, r2: int, d_pred: int,
               role: str, layer_id: int, dtype=np.float32) -> "Predictor":
        def init(rows, cols):
            return T.parameter((rng.standard_normal((rows, cols)) / np.sqrt(rows)).astype(dtype),
                               tag=f"predictor.{layer_id}.{role}")
        return Predictor(init(h, r1), init(r1, r2), init(r2, d_pred), role, layer_id)

    @property
    def d_pred(self) -> int:
        return self.w3.shape[1]

    def parameters(self) -> list[T.Tensor]:
        return [self.w1, self.w2, self.w3]

    def active_param_count(self) -> int:
        h = self.w1.shape[0]
        a1 = int(self.mask1.sum())
        a2 = int(self.mask2.sum())
        return h * a1 + a1 * a2 + a2 * self.d_pred

    def forward(self, x: T.Tensor, track: bool = False) -> T.Tensor:
        """Differentiable forward; masked neurons contribute exactly zero."""
        h1 = T.scale_cols(T.relu(T.matmul(x, self.w1)), self.mask1.astype(x.dtype))
        h2 = T.scale_cols(T.relu(T.matmul(h1, self.w2)), self.mask2.astype(x.dtype))
        if track:
            self.zero_counts1 += (h1.data == 0).sum(axis=0)
            self.zero_counts2 += (h2.data == 0).sum(axis=0)
            self.observed += x.shape[0]
        return T.matmul(h2, self.w3)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Fast inference path; bit-identical math to forward()."""
        dtype = self.w1.data.dtype
        x = np.asarray(x, dtype=dtype)
        h1 = np.maximum(x @ self.w1.data, 0) * self.mask1.astype(dtype)
        h2 = np.maximum(h1 @ self.w2.data, 0) * self.mask2.astype(dtype)
        return h2 @ self.w3.data

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to resume training, pruning state included."""
        return {
            "w1": self.w1.data,
            "w2": self.w2.data,
            "w3": self.w3.data,
            "mask1": self.mask1,
            "mask2": self.mask2,
            "zero_counts1": self.zero_counts1,
            "zero_counts2": self.zero_counts2,
            "observed": np.asarray([self.observed], dtype=np.int64),
        }

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name in ("w1", "w2", "w3"):
            tensor = getattr(self, name)
            if tensor.shape != state[name].shape:
                raise ContractError(f"predictor {name} shape mismatch on load")
            tensor.data[...] = state[name]
        self.mask1 = state["mask1"].astype(bool).copy()
        self.mask2 = state["mask2"].astype(bool).copy()
        self.zero_counts1 = state["zero_counts1"].astype(np.int64).copy()
        self.zero_counts2 = state["zero_counts2"].astype(np.int64).copy()
        self.observed = int(state["observed"][0])


def block_embed(x: np.ndarray, block_size: int) -> np.ndarray:
    """Representative embedding per token block: the block mean."""
    x = np.asarray(x)
    s, h = x.shape
    if s % block_size != 0:
        raise ContractError(f"sequence length {s} not a multiple of block size {block_size}")
    return x.reshape(s // block_size, block_size, h).mean(axis=1)


def _block_mean_rows(x: T.Tensor, block_size: int) -> T.Tensor:
    """Differentiable per-block mean over rows (token pooling mode)."""
    s, w = x.shape
    nb = s // block_size
    out = x.data.reshape(nb, block_size, w).mean(axis=1)

    def bw(g):
        return (np.repeat(g / block_size, block_size, axis=0),)

    return T.custom_op(out, "block_mean_rows", (x,), (), bw)


def _tril_pack(x: T.Tensor) -> T.Tensor:
    """Differentiable extraction of the packed lower triangle."""
    n = x.shape[0]
    rows, cols = np.tril_indices(n)
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[rows, cols] = g
        return (dx,)

    return T.custom_op(x.data[rows, cols], "tril_pack", (x,), (), bw)


def pair_block_outputs(
    p_q: Predictor,
    p_k: Predictor,
    x: np.ndarray,
    block_size: int,
    pooling: str = "mean",
    track: bool = False,
) -> tuple[T.Tensor, T.Tensor]:
    """Block embedding vectors from both predictors (differentiable).

    pooling="mean" pools tokens into block means before the predictors run;
    pooling="token" runs the predictors per token and averages predictions.
    """
    if pooling == "mean":
        xb = T.Tensor(block_embed(x, block_size), dtype=p_q.w1.data.dtype)
        return p_q.forward(xb, track=track), p_k.forward(xb, track=track)
    if pooling == "token":
        xt = T.Tensor(np.asarray(x), dtype=p_q.w1.data.dtype)
        eq = _block_mean_rows(p_q.forward(xt, track=track), block_size)
        ek = _block_mean_rows(p_k.forward(xt, track=track), block_size)
        return eq, ek
    raise ContractError(f"unknown pooling mode {pooling!r}")


def predicted_triangle(
    p_q: Predictor,
    p_k: Predictor,
    x: np.ndarray,
    block_size: int,
    pooling: str = "mean",
    track: bool = False,
) -> T.Tensor:
    """Packed lower triangle of predicted scores, unclamped (training path)."""
    eq, ek = pair_block_outputs(p_q, p_k, x, block_size, pooling, track=track)
    return _tril_pack(T.matmul(eq, T.transpose(ek)))


def predict_scores(
    p_q: Predictor,
    p_k: Predictor,
    x_blocks: np.ndarray,
    *,
    layer_id: int | None = None,
) -> sparsity.BlockScoreMatrix:
    """Approximate block scores: clamped dot products of the pair outputs."""
    if p_q.d_pred != p_k.d_pred:
        raise ContractError(
            f"predictor output dims differ: {p_q.d_pred} vs {p_k.d_pred}"
        )
    eq = p_q.predict(x_blocks)
    ek = p_k.predict(x_blocks)
    full = eq @ ek.T
    rows, cols = np.tril_indices(full.shape[0])
    packed = np.maximum(full[rows, cols], 0.0)
    return sparsity.BlockScoreMatrix(
        full.shape[0],
        block_size=1,
        scores=packed,
        layer_id=p_q.layer_id if layer_id is None else layer_id,
        component=sparsity.ATTENTION,
    )


def track_zero_frequency(p: Predictor, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run a forward pass, incrementing per-neuron exact-zero counters."""
    with T.no_grad():
        p.forward(T.Tensor(np.asarray(batch), dtype=p.w1.data.dtype), track=True)
    return p.zero_counts1, p.zero_counts2


def _prune_stage(counts: np.ndarray, mask: np.ndarray, target_active: int) -> None:
    n = mask.shape[0]
    if target_active < 1:
        raise ContractError("target would prune all neurons of a matrix")
    current = int(mask.sum())
    to_prune = current - target_active
    if to_prune <= 0:
        return
    # Highest zero frequency first; ties prune the lower neuron index first.
    order = np.lexsort((np.arange(n), -counts))
    pruned = 0
    for i in order:
        if pruned == to_prune:
            break
        if mask[i]:
            mask[i] = False
            pruned += 1


def elastic_prune(p: Predictor, target_fraction: float) -> Predictor:
    """Mask the highest-zero-frequency neurons down to the target fraction.

    Both intermediate stages (inputs of the second and third matrices) are
    pruned.  The predictor is modified in place and returned.
    """
    if p.observed == 0:
        raise ContractError("elastic_prune requires populated zero-frequency counters")
    if not (0.0 < target_fraction <= 1.0):
        raise ContractError(f"target fraction must lie in (0, 1], got {target_fraction}")
    for counts, mask in ((p.zero_counts1, p.mask1), (p.zero_counts2, p.mask2)):
        target_active = int(np.floor(target_fraction * mask.shape[0] + 1e-9))
        _prune_stage(counts, mask, target_active)
    return p


def retention_matched_threshold(
    pred_scores: np.ndarray,
    exact_scores: np.ndarray,
    exact_threshold: float,
) -> float:
    """Predicted-side threshold retaining the same block fraction the exact
    threshold retains.  The teacher is regressed on a monotone (log) scale,
    so retention levels transfer where raw score values do not."""
    pred_scores = np.asarray(pred_scores, dtype=np.float64).reshape(-1)
    exact_scores = np.asarray(exact_scores, dtype=np.float64).reshape(-1)
    if pred_scores.size == 0 or exact_scores.size == 0:
        raise ContractError("cannot match retention on empty score sets")
    retained = float((exact_scores >= exact_threshold).mean())
    if retained >= 1.0:
        return float("-inf")
    if retained <= 0.0:
        return float(pred_scores.max()) + 1.0
    # method="lower" snaps to a data value, so the retained count is at
    # least the exact count (recall-friendly rounding)
    return float(np.quantile(pred_scores, 1.0 - retained, method="lower"))


def recall(predicted: sparsity.SparsityPattern, exact: sparsity.SparsityPattern) -> float:
    """|predicted retained ∩ exact retained| / |exact retained| (1 if exact empty)."""
    if predicted.n_blocks != exact.n_blocks or predicted.block_size != exact.block_size:
        raise ContractError(
            f"pattern grids differ: {predicted.n_blocks}x{predicted.block_size} vs "
            f"{exact.n_blocks}x{exact.block_size}"
        )
    exact_set = set(exact.retained_blocks)
    if not exact_set:
        return 1.0
    hit = len(exact_set.intersection(predicted.retained_blocks))
    return hit / len(exact_set)


def precision(predicted: sparsity.SparsityPattern, exact: sparsity.SparsityPattern) -> float:
    """|predicted ∩ exact| / |predicted| (1 if predicted empty); reported alongside recall."""
    if predicted.n_blocks != exact.n_blocks or predicted.block_size != exact.block_size:
        raise ContractError("pattern grids differ")
    pred_set = set(predicted.retained_blocks)
    if not pred_set:
        return 1.0
    hit = len(pred_set.intersection(exact.retained_blocks))
    return hit / len(pred_set)


# ---------------------------------------------------------------------------
# offline training


@dataclass
class TeacherRecord:
    """One (batch, layer) training example for a predictor pair."""

    layer_id: int
    x: np.ndarray  # [s, h] token embeddings feeding the layer
    teacher_packed: np.ndarray  # exact block scores, packed lower triangle
    n_tokens: int
    block_size: int


def _eval_recall(
    pairs: dict[int, tuple[Predictor, Predictor]],
    data: list[TeacherRecord],
    thresholds: sparsity.ThresholdSet | None,
    pooling: str,
) -> tuple[float, float]:
    """Recall/precision of predicted patterns against exact-score patterns.

    The predicted-side threshold is re-initialized from the predicted scores
    at the retention level the exact threshold yields, since the teacher
    signal is regressed on a log scale.
    """
    if not data:
        return float("nan"), float("nan")
    by_layer: dict[int, list[tuple[TeacherRecord, np.ndarray]]] = {}
    with T.no_grad():
        for rec in data:
            p_q, p_k = pairs[rec.layer_id]
            pred = predicted_triangle(p_q, p_k, rec.x, rec.block_size, pooling).data
            by_layer.setdefault(rec.layer_id, []).append((rec, pred))
    recalls, precisions = [], []
    for layer_id, items in by_layer.items():
        pred_vecs, exact_vecs = [], []
        for rec, pred in items:
            nb = sparsity.n_blocks_for(rec.n_tokens, rec.block_size)
            bsm = sparsity.BlockScoreMatrix(nb, rec.block_size, np.maximum(pred, 0.0))
            pred_vecs.append(sparsity.token_block_scores(bsm))
            exact_bsm = sparsity.BlockScoreMatrix(nb, rec.block_size, rec.teacher_packed)
            exact_vecs.append(sparsity.token_block_scores(exact_bsm))
        if thresholds is not None:
            exact_thr = thresholds.get(layer_id, sparsity.ATTENTION)
        else:
            exact_thr = float(np.concatenate(exact_vecs).mean())
        pred_threshold = retention_matched_threshold(
            np.concatenate(pred_vecs), np.concatenate(exact_vecs), exact_thr)
        for (rec, _), pred_vec, exact_vec in zip(items, pred_vecs, exact_vecs):
            exact_pat = sparsity.eliminate(
                exact_vec, exact_thr, layer_id=layer_id,
                block_size=rec.block_size, n_tokens=rec.n_tokens)
            pred_pat = sparsity.eliminate(
                pred_vec, pred_threshold, layer_id=layer_id,
                block_size=rec.block_size, n_tokens=rec.n_tokens)
            recalls.append(recall(pred_pat, exact_pat))
            precisions.append(precision(pred_pat, exact_pat))
    return float(np.mean(recalls)), float(np.mean(precisions))


def fit_predictors(
    pairs: dict[int, tuple[Predictor, Predictor]],
    train_data: list[TeacherRecord],
    *,
    epochs: int,
    lr: float,
    val_data: list[TeacherRecord] | None = None,
    thresholds: sparsity.ThresholdSet | None = None,
    pooling: str = "mean",
    log_scale: bool = True,
    prune_target: float = 1.0,
    prune_every: int = 50,
    prune_step: float = 0.10,
    eval_every: int = 20,
    lr_decay: bool = True,
) -> list[PredictorTrainingRecord]:
    """Regress predicted block scores onto exact scores (log1p-scaled MSE).

    Every ``prune_every`` epochs 10% of the remaining intermediate neurons
    (those with the highest zero frequency) are masked, until the target
    active fraction is reached.
    """
    if not train_data:
        raise ContractError("no teacher records to train on")
    params: list[T.Tensor] = []
    for p_q, p_k in pairs.values():
        params.extend(p_q.parameters())
        params.extend(p_k.parameters())
    opt = Adam(params, lr=lr)
    labels = {
        id(rec): np.log1p(rec.teacher_packed) if log_scale else rec.teacher_packed
        for rec in train_data
    }
    history: list[PredictorTrainingRecord] = []
    last_recall = float("nan")
    for epoch in range(1, epochs + 1):
        if lr_decay:
            opt.lr = lr * (0.02 + 0.98 * 0.5 * (1.0 + np.cos(np.pi * (epoch - 1) / epochs)))
        losses = []
        for rec in train_data:
            p_q, p_k = pairs[rec.layer_id]
            pred = predicted_triangle(p_q, p_k, rec.x, rec.block_size, pooling, track=True)
            loss = T.mse_loss(pred, labels[id(rec)])
            if not np.isfinite(loss.data):
                raise ContractError(
                    f"predictor training diverged at epoch {epoch} "
                    f"(layer {rec.layer_id}, loss {float(loss.data)})"
                )
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        if prune_target < 1.0 and epoch % prune_every == 0:
            for p_q, p_k in pairs.values():
                for p in (p_q, p_k):
                    active_frac = p.mask1.sum() / p.mask1.shape[0]
                    nxt = max(prune_target, active_frac * (1.0 - prune_step))
                    if nxt < active_frac:
                        elastic_prune(p, nxt)
        if val_data is not None and (epoch % eval_every == 0 or epoch == epochs):
            last_recall, _ = _eval_recall(pairs, val_data, thresholds, pooling)
        param_count = sum(
            p.active_param_count() for pq, pk in pairs.values() for p in (pq, pk)
        )
        history.append(
            PredictorTrainingRecord(epoch, float(np.mean(losses)), last_recall, param_count)
        )
    return history
