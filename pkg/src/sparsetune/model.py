"""Small decoder-only transformer with LoRA adapters and token-sparse blocks.

Frozen base weights carry no gradient; only the adapters (and any attached
pattern predictors) are trainable.  Attention and MLP blocks accept a
per-layer sparsity pattern: retained tokens are processed at their original
positions, eliminated tokens ride the residual stream untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, ledger as ledger_mod, predictor as predictor_mod, sparsity
from . import tensor as T
from .errors import ContractError, DimensionError

PAD_TOKEN = 0
IGNORE_INDEX = -1


@dataclass
class ModelConfig:
    n_layers: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    vocab_size: int = 256
    max_seq_len: int = 2048
    mlp_variant: str = "silu"  # "relu" | "silu"
    mlp_dim: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    block_size: int = 16
    positions: str = "rope"  # "rope" | "learned"
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise DimensionError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.n_heads} heads"
            )
        if self.positions == "rope" and self.head_dim % 2 != 0:
            raise DimensionError("rotary positions need an even head dim")
        if self.max_seq_len % self.block_size != 0:
            raise ContractError(
                f"max_seq_len {self.max_seq_len} must be a multiple of block "
                f"size {self.block_size}"
            )
        if self.mlp_variant not in ("relu", "silu"):
            raise ContractError(f"unknown mlp variant {self.mlp_variant!r}")
        if self.positions not in ("rope", "learned"):
            raise ContractError(f"unknown position mode {self.positions!r}")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"unsupported dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class LoraAdapter:
    """Low-rank delta B @ A on a frozen matrix; B starts at zero so the
    adapted model equals the frozen model at step 0."""

    def __init__(self, rng: np.random.Generator, h: int, rank: int, alpha: float, dtype, tag: str):
        self.rank = rank
        self.scaling = alpha / rank
        self.a = T.parameter(
            (rng.standard_normal((h, rank)) / np.sqrt(h)).astype(dtype), tag=f"{tag}.a"
        )
        self.b = T.parameter(np.zeros((rank, h), dtype=dtype), tag=f"{tag}.b")

    def parameters(self) -> list[T.Tensor]:
        return [self.a, self.b]


class LayerState:
    """Frozen weights plus the trainable adapters for one layer."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, layer_id: int):
        h, m = cfg.hidden_dim, cfg.mlp_dim
        dt = cfg.np_dtype
        std = 1.0 / np.sqrt(h)

        def w(rows, cols, name):
            return T.frozen((rng.standard_normal((rows, cols)) * std).astype(dt),
                            tag=f"layer{layer_id}.{name}")

        self.layer_id = layer_id
        self.wq = w(h, h, "wq")
        self.wk = w(h, h, "wk")
        self.wv = w(h, h, "wv")
        self.wo = w(h, h, "wo")
        self.attn_norm_w = T.frozen(np.ones(h, dtype=dt), tag=f"layer{layer_id}.attn_norm")
        self.mlp_norm_w = T.frozen(np.ones(h, dtype=dt), tag=f"layer{layer_id}.mlp_norm")
        self.w_up = w(h, m, "w_up")
        self.w_down = w(m, h, "w_down")
        self.w_gate = w(h, m, "w_gate") if cfg.mlp_variant == "silu" else None
        if cfg.lora_rank > 0:
            self.lora_q = LoraAdapter(rng, h, cfg.lora_rank, cfg.lora_alpha, dt,
                                      f"layer{layer_id}.lora_q")
            self.lora_v = LoraAdapter(rng, h, cfg.lora_rank, cfg.lora_alpha, dt,
                                      f"layer{layer_id}.lora_v")
        else:
            self.lora_q = None
            self.lora_v = None
        # duck-typed fields the kernels read
        self.n_heads = cfg.n_heads
        self.rope = cfg.positions == "rope"
        self.rope_base = cfg.rope_base
        self.mlp_variant = cfg.mlp_variant
        # attached by the harness once predictors are trained
        self.predictor_q: predictor_mod.Predictor | None = None
        self.predictor_k: predictor_mod.Predictor | None = None

    def frozen_tensors(self) -> dict[str, T.Tensor]:
        out = {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "attn_norm": self.attn_norm_w, "mlp_norm": self.mlp_norm_w,
            "w_up": self.w_up, "w_down": self.w_down,
        }
        if self.w_gate is not None:
            out["w_gate"] = self.w_gate
        return out


class DecoderModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        std = 1.0 / np.sqrt(cfg.hidden_dim)
        self.embed = T.frozen(
            (rng.standard_normal((cfg.vocab_size, cfg.hidden_dim)) * std).astype(dt),
            tag="embed")
        if cfg.positions == "learned":
            self.pos_embed = T.frozen(
                (rng.standard_normal((cfg.max_seq_len, cfg.hidden_dim)) * std).astype(dt),
                tag="pos_embed")
        else:
            self.pos_embed = None
        self.layers = [LayerState(rng, cfg, i) for i in range(cfg.n_layers)]
        self.final_norm_w = T.frozen(np.ones(cfg.hidden_dim, dtype=dt), tag="final_norm")
        self.lm_head = T.frozen(
            (rng.standard_normal((cfg.hidden_dim, cfg.vocab_size)) * std).astype(dt),
            tag="lm_head")

    # -- parameters ---------------------------------------------------------

    def adapter_parameters(self) -> list[T.Tensor]:
        params: list[T.Tensor] = []
        for layer in self.layers:
            for adapter in (layer.lora_q, layer.lora_v):
                if adapter is not None:
                    params.extend(adapter.parameters())
        return params

    def predictor_parameters(self) -> list[T.Tensor]:
        params: list[T.Tensor] = []
        for layer in self.layers:
            for p in (layer.predictor_q, layer.predictor_k):
                if p is not None:
                    params.extend(p.parameters())
        return params

    def trainable_parameters(self) -> list[T.Tensor]:
        """Exactly the adapter and predictor tensors; independent of s."""
        return self.adapter_parameters() + self.predictor_parameters()

    def attach_predictors(self, pairs: dict[int, tuple[predictor_mod.Predictor, predictor_mod.Predictor]]) -> None:
        for layer_id, (p_q, p_k) in pairs.items():
            self.layers[layer_id].predictor_q = p_q
            self.layers[layer_id].predictor_k = p_k

    def predictor_pairs(self) -> dict[int, tuple[predictor_mod.Predictor, predictor_mod.Predictor]]:
        return {
            layer.layer_id: (layer.predictor_q, layer.predictor_k)
            for layer in self.layers
            if layer.predictor_q is not None
        }

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed.data, "final_norm": self.final_norm_w.data,
               "lm_head": self.lm_head.data}
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed.data
        for layer in self.layers:
            prefix = f"layer{layer.layer_id}"
            for name, tensor in layer.frozen_tensors().items():
                out[f"{prefix}.{name}"] = tensor.data
            for tag, adapter in (("lora_q", layer.lora_q), ("lora_v", layer.lora_v)):
                if adapter is not None:
                    out[f"{prefix}.{tag}.a"] = adapter.a.data
                    out[f"{prefix}.{tag}.b"] = adapter.b.data
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        for name, arr in own.items():
            if name not in state:
                raise ContractError(f"checkpoint is missing tensor {name!r}")
            if state[name].shape != arr.shape:
                raise ContractError(f"checkpoint tensor {name!r} has shape "
                                    f"{state[name].shape}, expected {arr.shape}")
            arr[...] = state[name]

    # -- padding ---------------------------------------------------------------

    def pad_tokens(self, tokens: np.ndarray, targets: np.ndarray | None):
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[0]
        if n == 0:
            raise ContractError("empty token sequence")
        if n > self.config.max_seq_len:
            raise ContractError(f"sequence length {n} exceeds max {self.config.max_seq_len}")
        if targets is None:
            targets = np.concatenate([tokens[1:], [IGNORE_INDEX]])
        else:
            targets = np.asarray(targets, dtype=np.int64)
            if targets.shape != tokens.shape:
                raise ContractError("targets must match token count")
        b = self.config.block_size
        n_pad = -(-n // b) * b
        if n_pad > n:
            tokens = np.concatenate([tokens, np.full(n_pad - n, PAD_TOKEN, dtype=np.int64)])
            targets = np.concatenate([targets, np.full(n_pad - n, IGNORE_INDEX, dtype=np.int64)])
        return tokens, targets, n

    # -- forward ---------------------------------------------------------------

    def embed_tokens(self, ids: np.ndarray) -> T.Tensor:
        x = T.embedding_lookup(self.embed, ids)
        if self.pos_embed is not None:
            x = T.add(x, T.embedding_lookup(self.pos_embed, np.arange(len(ids))))
        return x

    def forward_step(
        self,
        tokens: np.ndarray,
        targets: np.ndarray | None = None,
        *,
        pattern_source=None,
        segments: int = 1,
        fused: bool = True,
        fuse_projections: bool = True,
    ) -> tuple[T.Tensor, T.Tensor]:
        """Run all layers under their patterns; returns (loss, final hidden).

        segments >= 1 routes the loss through the segment-based kernel;
        segments == 0 disables it (dense logits + plain cross entropy).
        """
        led = ledger_mod.get()
        ids, tgts, n_valid = self.pad_tokens(tokens, targets)
        n_pad = len(ids)
        with led.scope("embed"):
            x = self.embed_tokens(ids)
        for layer in self.layers:
            attn_pat = mlp_pat = None
            if pattern_source is not None:
                attn_pat = pattern_source.pattern(
                    layer.layer_id, sparsity.ATTENTION, x.data, n_valid)
            plan = self._plan_from(attn_pat, n_pad)
            with led.scope(f"layer{layer.layer_id}.attn"):
                if fused:
                    x = kernels.sparse_attention_fused(x, plan, layer, fuse_projections)
                else:
                    x = kernels.sparse_attention_naive(x, plan, layer)
            if pattern_source is not None:
                mlp_pat = pattern_source.pattern(
                    layer.layer_id, sparsity.MLP, x.data, n_valid)
            plan = self._plan_from(mlp_pat, n_pad)
            with led.scope(f"layer{layer.layer_id}.mlp"):
                if fused:
                    x = kernels.sparse_mlp_fused(x, plan, layer, fuse_projections)
                else:
                    x = kernels.sparse_mlp_naive(x, plan, layer)
        with led.scope("final"):
            hidden = T.rmsnorm(x, self.final_norm_w)
        with led.scope("loss"):
            if segments == 0:
                logits = T.matmul(hidden, self.lm_head)
                loss = T.cross_entropy(logits, tgts, ignore_index=IGNORE_INDEX)
            else:
                plan = kernels.SegmentPlan.even(n_pad, segments)
                loss = kernels.segmented_loss_and_grad(
                    hidden, self.lm_head, tgts, plan, ignore_index=IGNORE_INDEX)
        led.mark("post_forward")
        return loss, hidden

    @staticmethod
    def _plan_from(pattern: sparsity.SparsityPattern | None, n_pad: int) -> kernels.GatherPlan:
        if pattern is None:
            return kernels.GatherPlan.full(n_pad)
        return kernels.GatherPlan(pattern.token_indices, n_pad)

    # -- block contributions (pre-residual) ---------------------------------------

    def attention_block_forward(self, x: T.Tensor, pattern: sparsity.SparsityPattern | None,
                                layer: LayerState) -> T.Tensor:
        """Pre-residual attention output; eliminated rows are exactly zero."""
        n = x.shape[0]
        plan = self._plan_from(pattern, n)
        if plan.k == 0:
            return T.zeros((n, self.config.hidden_dim), dtype=x.data.dtype)
        xn = T.gather_rmsnorm(x, plan.indices, layer.attn_norm_w)
        out = kernels.attention_core(xn, plan.indices, layer)
        return T.scatter_rows(out, plan.indices, n)

    def mlp_block_forward(self, x: T.Tensor, pattern: sparsity.SparsityPattern | None,
                          layer: LayerState) -> T.Tensor:
        n = x.shape[0]
        plan = self._plan_from(pattern, n)
        if plan.k == 0:
            return T.zeros((n, self.config.hidden_dim), dtype=x.data.dtype)
        xn = T.gather_rmsnorm(x, plan.indices, layer.mlp_norm_w)
        out = kernels.mlp_core(xn, layer)
        return T.scatter_rows(out, plan.indices, n)


# ---------------------------------------------------------------------------
# no-grad scoring helpers


def _rmsnorm_np(x: np.ndarray, w: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv.astype(x.dtype) * w


def _project_np(xn: np.ndarray, weight: T.Tensor, adapter: LoraAdapter | None) -> np.ndarray:
    out = xn @ weight.data
    if adapter is not None:
        out = out + (xn @ adapter.a.data) @ adapter.b.data * adapter.scaling
    return out


def _rope_np(x: np.ndarray, positions: np.ndarray, n_heads: int, base: float) -> np.ndarray:
    n, h = x.shape
    d = h // n_heads
    half = d // 2
    cos, sin = T._rope_tables(positions, half, base, x.dtype)
    x3 = x.reshape(n, n_heads, d)
    xa, xb = x3[..., :half], x3[..., half:]
    ca, sa = cos[:, None, :], sin[:, None, :]
    return np.concatenate([xa * ca - xb * sa, xa * sa + xb * ca], axis=-1).reshape(n, h)


def layer_qk(layer: LayerState, x_np: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The layer's post-rotation Q and K (adapters included) as [H, s, d]."""
    n, h = x_np.shape
    xn = _rmsnorm_np(x_np, layer.attn_norm_w.data)
    q = _project_np(xn, layer.wq, layer.lora_q)
    k = _project_np(xn, layer.wk, None)
    if layer.rope:
        positions = np.arange(n)
        q = _rope_np(q, positions, layer.n_heads, layer.rope_base)
        k = _rope_np(k, positions, layer.n_heads, layer.rope_base)
    d = h // layer.n_heads
    to_heads = lambda a: np.ascontiguousarray(a.reshape(n, layer.n_heads, d).transpose(1, 0, 2))
    return to_heads(q), to_heads(k)


def mlp_block_score_vector(layer: LayerState, x_np: np.ndarray, block_size: int,
                           n_valid: int) -> np.ndarray:
    """Exact MLP block scores from a streaming, discard-as-you-go pass.

    Inner activations are computed one token block at a time and dropped
    immediately after scoring, so nothing here is retained for backward.
    """
    led = ledger_mod.get()
    s = x_np.shape[0]
    nb = sparsity.n_blocks_for(s, block_size)
    out = np.zeros(nb)
    with led.scope("mlp_scores"):
        for blk in range(nb):
            t0, t1 = blk * block_size, min((blk + 1) * block_size, s, n_valid)
            if t1 <= t0:
                continue
            xn = _rmsnorm_np(x_np[t0:t1], layer.mlp_norm_w.data)
            if layer.mlp_variant == "silu":
                gate = xn @ layer.w_gate.data
                inner = gate * T.sigmoid_np(gate) * (xn @ layer.w_up.data)
            else:
                inner = np.maximum(xn @ layer.w_up.data, 0)
            handle = led.alloc(inner.nbytes, ledger_mod.TRANSIENT, op="mlp_score_tile")
            out[blk] = sparsity.mlp_token_informativeness(inner).max()
            led.free(handle, op="mlp_score_tile")
    return out


# ---------------------------------------------------------------------------
# pattern sources


class PatternSourceBase:
    """Interleaves scoring with the layer loop; records retained fractions."""

    def __init__(self):
        self.last_fractions: dict[tuple[int, str], float] = {}

    def pattern(self, layer_id: int, component: str, x_np: np.ndarray,
                n_valid: int) -> sparsity.SparsityPattern | None:
        raise NotImplementedError

    def _note(self, layer_id: int, component: str,
              pattern: sparsity.SparsityPattern | None) -> sparsity.SparsityPattern | None:
        self.last_fractions[(layer_id, component)] = (
            1.0 if pattern is None else pattern.retained_fraction
        )
        return pattern


class AllRetainSource(PatternSourceBase):
    def pattern(self, layer_id, component, x_np, n_valid):
        return self._note(layer_id, component, None)


class FixedPatternSource(PatternSourceBase):
    """Serves pre-built patterns, keyed by (layer, component)."""

    def __init__(self, patterns: dict[tuple[int, str], sparsity.SparsityPattern | None]):
        super().__init__()
        self.patterns = patterns

    def pattern(self, layer_id, component, x_np, n_valid):
        return self._note(layer_id, component, self.patterns.get((layer_id, component)))


class FractionSource(PatternSourceBase):
    """Deterministic patterns retaining an evenly spaced fraction of blocks."""

    def __init__(self, fraction: float, block_size: int):
        super().__init__()
        self.fraction = fraction
        self.block_size = block_size

    def pattern(self, layer_id, component, x_np, n_valid):
        s = x_np.shape[0]
        nb = sparsity.n_blocks_for(s, self.block_size)
        keep = max(1, int(round(nb * self.fraction)))
        blocks = tuple(np.unique(np.linspace(0, nb - 1, keep).round().astype(int)).tolist())
        pat = sparsity.SparsityPattern(layer_id, component, blocks, self.block_size, s)
        return self._note(layer_id, component, pat)


class ExactPatternSource(PatternSourceBase):
    """Patterns from exact scores; with thresholds=None it only profiles.

    Attention blocks are scored from the layer's actual Q/K via the
    streaming exact scorer; MLP blocks from a streaming pass over the inner
    activations.  Set record=True to keep the per-layer score artifacts.
    """

    def __init__(self, model: DecoderModel, thresholds: sparsity.ThresholdSet | None,
                 *, mlp_scoring: bool = True, sink_first_block: bool = False,
                 record: bool = False, record_inputs: bool = False,
                 ratio_frac: float | None = None):
        super().__init__()
        self.model = model
        self.thresholds = thresholds
        self.mlp_scoring = mlp_scoring
        self.sink_first_block = sink_first_block
        self.record = record
        self.record_inputs = record_inputs
        self.ratio_frac = ratio_frac
        self.recorded_matrices: list[sparsity.BlockScoreMatrix] = []
        self.recorded_vectors: dict[tuple[int, str], list[np.ndarray]] = {}
        self.recorded_inputs: dict[int, list[np.ndarray]] = {}
        self.recorded_ratios: dict[int, list[float]] = {}

    def _threshold(self, layer_id: int, component: str) -> float | None:
        if self.thresholds is None:
            return None
        return self.thresholds.get(layer_id, component)

    def pattern(self, layer_id, component, x_np, n_valid):
        cfg = self.model.config
        b = cfg.block_size
        layer = self.model.layers[layer_id]
        if component == sparsity.ATTENTION:
            q, k = layer_qk(layer, x_np)
            bsm = sparsity.exact_block_scores(
                q, k, b, n_valid=n_valid, layer_id=layer_id, component=component)
            vec = sparsity.token_block_scores(bsm)
            if self.record:
                self.recorded_matrices.append(bsm)
                if self.record_inputs:
                    self.recorded_inputs.setdefault(layer_id, []).append(x_np.copy())
                if self.ratio_frac is not None:
                    self.recorded_ratios.setdefault(layer_id, []).append(
                        sparsity.attention_score_ratio(q, k, self.ratio_frac, n_valid=n_valid))
        else:
            if not self.mlp_scoring:
                return self._note(layer_id, component, None)
            vec = mlp_block_score_vector(layer, x_np, b, n_valid)
        if self.record:
            self.recorded_vectors.setdefault((layer_id, component), []).append(vec)
        thr = self._threshold(layer_id, component)
        if thr is None:
            return self._note(layer_id, component, None)
        force = (0,) if self.sink_first_block else ()
        pat = sparsity.eliminate(
            vec, thr, layer_id=layer_id, component=component,
            block_size=b, n_tokens=x_np.shape[0], force_blocks=force)
        return self._note(layer_id, component, pat)


class PredictedPatternSource(PatternSourceBase):
    """Patterns from the trained predictor pairs (attention) plus streaming
    exact MLP scores; thresholds for the predicted side must have been
    re-initialized in prediction space.

    Predicted score distributions drift as the adapters train, so with
    ``recalibrate_every`` > 0 the attention thresholds are periodically
    re-derived from recently observed predicted scores at the layer's
    target retention level (threshold initialization applied to fresh
    predictions), keeping the tuned operating point stable.
    """

    def __init__(self, model: DecoderModel, pred_thresholds: sparsity.ThresholdSet,
                 *, mlp_scoring: bool = True, sink_first_block: bool = False,
                 pooling: str = "mean",
                 target_retention: dict[int, float] | None = None,
                 recalibrate_every: int = 0, history: int = 8):
        super().__init__()
        self.model = model
        self.thresholds = pred_thresholds
        self.mlp_scoring = mlp_scoring
        self.sink_first_block = sink_first_block
        self.pooling = pooling
        self.target_retention = target_retention or {}
        self.recalibrate_every = recalibrate_every
        self.history = history
        self._recent: dict[int, list[np.ndarray]] = {}
        self._calls: dict[int, int] = {}

    def _maybe_recalibrate(self, layer_id: int, vec: np.ndarray) -> None:
        if not self.recalibrate_every or layer_id not in self.target_retention:
            return
        recent = self._recent.setdefault(layer_id, [])
        recent.append(vec)
        if len(recent) > self.history:
            recent.pop(0)
        self._calls[layer_id] = self._calls.get(layer_id, 0) + 1
        if self._calls[layer_id] % self.recalibrate_every != 0:
            return
        pooled = np.concatenate(recent)
        retained = min(max(self.target_retention[layer_id], 0.0), 1.0)
        if retained >= 1.0:
            thr = float("-inf")
        elif retained <= 0.0:
            thr = float(pooled.max()) + 1.0
        else:
            thr = float(np.quantile(pooled, 1.0 - retained, method="lower"))
        self.thresholds.set(layer_id, sparsity.ATTENTION, thr)

    def pattern(self, layer_id, component, x_np, n_valid):
        cfg = self.model.config
        b = cfg.block_size
        layer = self.model.layers[layer_id]
        if component == sparsity.ATTENTION:
            if layer.predictor_q is None or layer.predictor_k is None:
                raise ContractError(f"layer {layer_id} has no attached predictors")
            with T.no_grad():
                packed = predictor_mod.predicted_triangle(
                    layer.predictor_q, layer.predictor_k, x_np, b, self.pooling).data
            nb = sparsity.n_blocks_for(x_np.shape[0], b)
            bsm = sparsity.BlockScoreMatrix(
                nb, b, np.maximum(packed, 0.0), layer_id=layer_id)
            vec = sparsity.token_block_scores(bsm)
            self._maybe_recalibrate(layer_id, vec)
            thr = self.thresholds.get(layer_id, sparsity.ATTENTION)
        else:
            if not self.mlp_scoring:
                return self._note(layer_id, component, None)
            vec = mlp_block_score_vector(layer, x_np, b, n_valid)
            thr = self.thresholds.get(layer_id, sparsity.MLP)
        force = (0,) if self.sink_first_block else ()
        pat = sparsity.eliminate(
            vec, thr, layer_id=layer_id, component=component,
            block_size=b, n_tokens=x_np.shape[0], force_blocks=force)
        return self._note(layer_id, component, pat)
