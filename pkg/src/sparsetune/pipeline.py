"""End-to-end pipeline stages behind the CLI subcommands.

Artifact layout inside a run directory (fixed names so `report` needs
nothing beyond the directory):

    config.json                     config snapshot
    profiles/scores.ckpt            packed score triangles + block vectors
    profiles/sparsity_ratios.csv    per-layer score sparsity (ratio table)
    profiles/layer_scores.csv       mean token-block score per layer
    thresholds.json                 tuned ThresholdSet
    predictors.ckpt                 predictor pairs incl. masks/counters
    predictor_training.csv          loss/recall/params per epoch
    metrics.csv / metrics.json      per-step fine-tuning records
    ledger.csv / ledger_report.json memory accounting
    checkpoints/final.ckpt          model + predictors + thresholds
    bench.csv / bench.json          kernel benchmark rows
    report/summary.json             regenerated summaries
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import checkpoint, data, kernels, ledger as ledger_mod, metrics as metrics_mod
from . import model as model_mod
from . import predictor as predictor_mod
from . import sparsity
from . import tensor as T
from .config import RunConfig
from .errors import ContractError, DependencyError
from .optim import Adam

PROFILE_FILE = "profiles/scores.ckpt"
RATIO_FILE = "profiles/sparsity_ratios.csv"
LAYER_SCORE_FILE = "profiles/layer_scores.csv"
THRESHOLDS_FILE = "thresholds.json"
PREDICTORS_FILE = "predictors.ckpt"
PREDICTOR_CURVE_FILE = "predictor_training.csv"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
LEDGER_CSV = "ledger.csv"
LEDGER_REPORT = "ledger_report.json"
FINAL_CKPT = "checkpoints/final.ckpt"
BASE_CKPT = "checkpoints/base.ckpt"
BENCH_CSV = "bench.csv"
BENCH_JSON = "bench.json"


def _out_dir(cfg: RunConfig, out: str | None) -> Path:
    path = Path(out or cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _save_config_snapshot(cfg: RunConfig, out: Path) -> None:
    cfg.save(out / "config.json")


def _load_shards(cfg: RunConfig):
    if not cfg.corpus:
        raise DependencyError("no corpus configured; set `corpus` in the config")
    if not Path(cfg.corpus).exists():
        raise DependencyError(f"corpus file not found: {cfg.corpus}")
    seqs = data.load_corpus(cfg.corpus, cfg.seq_len,
                            vocab_size=cfg.model.vocab_size, tokenizer=cfg.tokenizer)
    return data.split_shards(seqs, cfg.train.eval_fraction)


def build_model(cfg: RunConfig) -> model_mod.DecoderModel:
    return model_mod.DecoderModel(cfg.model, seed=cfg.train.seed)


def ensure_base(cfg: RunConfig, out_dir: Path) -> model_mod.DecoderModel:
    """The model every pipeline stage starts from.

    With warmup_steps > 0, a short dense LoRA run establishes a trained base
    (the desk-scale stand-in for profiling a pretrained model) which is
    cached in the run directory; otherwise the freshly seeded model is used.
    """
    model = build_model(cfg)
    warmup = cfg.train.warmup_steps
    if warmup <= 0:
        return model
    base_path = out_dir / BASE_CKPT
    if base_path.exists():
        tensors, _, meta = checkpoint.load_container(base_path)
        if meta.get("config_hash") != cfg.config_hash() or meta.get("warmup_steps") != warmup:
            raise ContractError(
                "cached base checkpoint was built under a different configuration; "
                f"remove {base_path} or rerun in a fresh directory")
        model.load_state_arrays(tensors)
        return model
    train_seqs, _ = _load_shards(cfg)
    opt = Adam(model.adapter_parameters(), lr=cfg.train.lr,
               weight_decay=cfg.train.weight_decay)
    for step in range(warmup):
        tokens, targets = train_seqs[step % len(train_seqs)]
        loss, _ = model.forward_step(tokens, targets,
                                     segments=cfg.segments_for(cfg.seq_len))
        T.backward(loss)
        opt.step()
        opt.zero_grad()
    checkpoint.save_container(
        base_path, model.state_arrays(), cfg.to_dict(),
        {"config_hash": cfg.config_hash(), "warmup_steps": warmup})
    return model


# ---------------------------------------------------------------------------
# profile


def run_profile(cfg: RunConfig, out: str | None = None) -> Path:
    out_dir = _out_dir(cfg, out)
    _save_config_snapshot(cfg, out_dir)
    train_seqs, _ = _load_shards(cfg)
    model = ensure_base(cfg, out_dir)
    source = model_mod.ExactPatternSource(
        model, thresholds=None, mlp_scoring=cfg.sparsity.mlp_scoring,
        record=True, ratio_frac=0.3)
    n_batches = min(cfg.sparsity.profile_batches, len(train_seqs))
    with T.no_grad():
        for i in range(n_batches):
            tokens, targets = train_seqs[i]
            model.forward_step(tokens, targets, pattern_source=source)

    tensors: dict[str, np.ndarray] = {}
    for i, bsm in enumerate(source.recorded_matrices):
        batch = i // cfg.model.n_layers
        tensors[f"tri/L{bsm.layer_id}/attention/b{batch}"] = bsm.scores
    for (layer_id, comp), vecs in source.recorded_vectors.items():
        for batch, vec in enumerate(vecs):
            tensors[f"vec/L{layer_id}/{comp}/b{batch}"] = vec
    meta = {
        "config_hash": cfg.config_hash(),
        "block_size": cfg.model.block_size,
        "n_batches": n_batches,
        "components": sorted({c for (_, c) in source.recorded_vectors}),
    }
    checkpoint.save_container(out_dir / PROFILE_FILE, tensors, cfg.to_dict(), meta)

    ratio_rows = []
    for layer_id, ratios in sorted(source.recorded_ratios.items()):
        for batch, ratio in enumerate(ratios):
            ratio_rows.append({
                "layer": layer_id, "batch": batch,
                "ratio_below_0.3max": "" if np.isnan(ratio) else round(ratio, 6),
                "flagged_undefined": int(np.isnan(ratio)),
            })
    metrics_mod.write_rows_csv(out_dir / RATIO_FILE, ratio_rows)

    layer_rows = []
    for (layer_id, comp), vecs in sorted(source.recorded_vectors.items()):
        pooled = np.concatenate([v.reshape(-1) for v in vecs])
        layer_rows.append({
            "layer": layer_id, "component": comp,
            "mean_token_block_score": float(pooled.mean()),
            "max_token_block_score": float(pooled.max()),
        })
    metrics_mod.write_rows_csv(out_dir / LAYER_SCORE_FILE, layer_rows)
    return out_dir


def load_profile_vectors(out_dir: Path) -> tuple[dict, dict]:
    path = out_dir / PROFILE_FILE
    if not path.exists():
        raise DependencyError(
            f"missing profile artifact {path}; run the `profile` step first")
    tensors, _, meta = checkpoint.load_container(path)
    profile: dict[tuple[int, str], list[np.ndarray]] = {}
    for name, arr in tensors.items():
        if not name.startswith("vec/"):
            continue
        _, layer, comp, _ = name.split("/")
        profile.setdefault((int(layer[1:]), comp), []).append(arr)
    return profile, meta


# ---------------------------------------------------------------------------
# tune-thresholds


def _mean_eval_loss(model: model_mod.DecoderModel, eval_seqs, source, segments: int,
                    limit: int) -> float:
    losses = []
    with T.no_grad():
        for tokens, targets in eval_seqs[:limit]:
            loss, _ = model.forward_step(
                tokens, targets, pattern_source=source, segments=segments)
            losses.append(float(loss.data))
    return float(np.mean(losses))


def run_tune_thresholds(cfg: RunConfig, out: str | None = None) -> sparsity.ThresholdSet:
    out_dir = _out_dir(cfg, out)
    _save_config_snapshot(cfg, out_dir)
    profile, meta = load_profile_vectors(out_dir)
    if meta.get("config_hash") != cfg.config_hash():
        raise ContractError(
            "profile artifacts were generated under a different configuration "
            f"(hash {meta.get('config_hash')} != {cfg.config_hash()}); rerun `profile`")
    thresholds = sparsity.init_thresholds(profile, config_hash=cfg.config_hash())

    _, eval_seqs = _load_shards(cfg)
    model = ensure_base(cfg, out_dir)
    segments = cfg.segments_for(cfg.seq_len)
    limit = cfg.train.eval_batches

    def acc(ts: sparsity.ThresholdSet) -> float:
        source = model_mod.ExactPatternSource(
            model, ts, mlp_scoring=cfg.sparsity.mlp_scoring,
            sink_first_block=cfg.sparsity.sink_first_block)
        return -_mean_eval_loss(model, eval_seqs, source, segments, limit)

    tuned = sparsity.tune_thresholds(
        acc, thresholds,
        eps=cfg.sparsity.threshold_eps, eta=cfg.sparsity.threshold_eta,
        rounds=cfg.sparsity.tune_rounds)
    tuned.config_hash = cfg.config_hash()
    (out_dir / THRESHOLDS_FILE).write_text(json.dumps(tuned.to_dict(), indent=2) + "\n")
    return tuned


def load_thresholds(out_dir: Path, cfg: RunConfig) -> sparsity.ThresholdSet:
    path = out_dir / THRESHOLDS_FILE
    if not path.exists():
        raise DependencyError(
            f"missing thresholds artifact {path}; run the `tune-thresholds` step first")
    ts = sparsity.ThresholdSet.from_dict(json.loads(path.read_text()))
    if ts.config_hash != cfg.config_hash():
        raise ContractError(
            "thresholds were generated under a different configuration "
            f"(hash {ts.config_hash} != {cfg.config_hash()}); rerun the pipeline")
    return ts


# ---------------------------------------------------------------------------
# train-predictors


def _collect_teacher_records(cfg: RunConfig, model, seqs, n_batches: int):
    source = model_mod.ExactPatternSource(
        model, thresholds=None, mlp_scoring=False, record=True, record_inputs=True)
    with T.no_grad():
        for i in range(min(n_batches, len(seqs))):
            tokens, targets = seqs[i]
            model.forward_step(tokens, targets, pattern_source=source)
    records: list[predictor_mod.TeacherRecord] = []
    per_layer_tris: dict[int, list[np.ndarray]] = {}
    for bsm in source.recorded_matrices:
        per_layer_tris.setdefault(bsm.layer_id, []).append(bsm.scores)
    for layer_id, tris in per_layer_tris.items():
        for x, tri in zip(source.recorded_inputs[layer_id], tris):
            records.append(predictor_mod.TeacherRecord(
                layer_id, x, tri, x.shape[0], cfg.model.block_size))
    return records


def train_predictors(model: model_mod.DecoderModel, shard, epochs: int, lr: float,
                     *, block_size: int | None = None, val_shard=None,
                     thresholds: sparsity.ThresholdSet | None = None, **fit_kwargs):
    """Library entry point: teacher labels from the model's exact scores on
    a corpus shard, then offline regression.  Returns (pairs, history)."""
    cfg = RunConfig()
    cfg.model = (dataclasses.replace(model.config, block_size=block_size)
                 if block_size is not None else model.config)
    records = _collect_teacher_records(cfg, model, shard, len(shard))
    val_records = (_collect_teacher_records(cfg, model, val_shard, len(val_shard))
                   if val_shard else None)
    rng = np.random.default_rng(0)
    pc = cfg.predictor
    pairs = {
        layer_id: (
            predictor_mod.Predictor.create(
                rng, cfg.model.hidden_dim, pc.r1, pc.r2, pc.d_pred, "q", layer_id,
                dtype=cfg.model.np_dtype),
            predictor_mod.Predictor.create(
                rng, cfg.model.hidden_dim, pc.r1, pc.r2, pc.d_pred, "k", layer_id,
                dtype=cfg.model.np_dtype),
        )
        for layer_id in range(cfg.model.n_layers)
    }
    history = predictor_mod.fit_predictors(
        pairs, records, epochs=epochs, lr=lr, val_data=val_records,
        thresholds=thresholds, **fit_kwargs)
    return pairs, history


def run_train_predictors(cfg: RunConfig, out: str | None = None):
    out_dir = _out_dir(cfg, out)
    _save_config_snapshot(cfg, out_dir)
    thresholds = load_thresholds(out_dir, cfg)
    train_seqs, eval_seqs = _load_shards(cfg)
    model = ensure_base(cfg, out_dir)
    pc = cfg.predictor
    train_records = _collect_teacher_records(cfg, model, train_seqs, pc.teacher_batches)
    val_records = _collect_teacher_records(cfg, model, eval_seqs, pc.val_batches)

    rng = np.random.default_rng(cfg.train.seed + 17)
    pairs = {
        layer_id: (
            predictor_mod.Predictor.create(
                rng, cfg.model.hidden_dim, pc.r1, pc.r2, pc.d_pred, "q", layer_id,
                dtype=cfg.model.np_dtype),
            predictor_mod.Predictor.create(
                rng, cfg.model.hidden_dim, pc.r1, pc.r2, pc.d_pred, "k", layer_id,
                dtype=cfg.model.np_dtype),
        )
        for layer_id in range(cfg.model.n_layers)
    }
    history = predictor_mod.fit_predictors(
        pairs, train_records,
        epochs=pc.epochs, lr=pc.lr, val_data=val_records, thresholds=thresholds,
        pooling=pc.pooling, log_scale=pc.log_scale,
        prune_target=pc.prune_target, prune_every=pc.prune_every,
        prune_step=pc.prune_step)

    pred_thresholds, retention = predicted_threshold_init(cfg, pairs, train_records, thresholds)
    save_predictors(out_dir / PREDICTORS_FILE, cfg, pairs, pred_thresholds, retention)
    metrics_mod.write_rows_csv(out_dir / PREDICTOR_CURVE_FILE, [
        {"epoch": h.epoch, "train_loss": h.train_loss, "recall": h.recall,
         "param_count": h.param_count}
        for h in history
    ])
    return pairs, history


def predicted_threshold_init(cfg, pairs, records, exact_thresholds) -> sparsity.ThresholdSet:
    """Attention thresholds re-initialized in prediction space.

    The teacher signal is regressed on a log scale, so exact-space score
    thresholds do not transfer as values.  What must transfer is the
    retention level: the predicted-side threshold is the quantile of the
    pooled predicted token-block scores that retains the same fraction of
    blocks the tuned exact threshold retains on the teacher shard.  MLP
    thresholds (scored exactly at runtime) carry over unchanged.
    """
    pred_by_layer: dict[int, list[np.ndarray]] = {}
    exact_by_layer: dict[int, list[np.ndarray]] = {}
    with T.no_grad():
        for rec in records:
            p_q, p_k = pairs[rec.layer_id]
            packed = predictor_mod.predicted_triangle(
                p_q, p_k, rec.x, rec.block_size, cfg.predictor.pooling).data
            nb = sparsity.n_blocks_for(rec.n_tokens, rec.block_size)
            bsm = sparsity.BlockScoreMatrix(nb, rec.block_size, np.maximum(packed, 0.0))
            pred_by_layer.setdefault(rec.layer_id, []).append(sparsity.token_block_scores(bsm))
            exact_bsm = sparsity.BlockScoreMatrix(nb, rec.block_size, rec.teacher_packed)
            exact_by_layer.setdefault(rec.layer_id, []).append(
                sparsity.token_block_scores(exact_bsm))
    ts = sparsity.ThresholdSet(config_hash=cfg.config_hash())
    retention: dict[int, float] = {}
    for layer_id, pred_vecs in pred_by_layer.items():
        pred_scores = np.concatenate(pred_vecs)
        exact_scores = np.concatenate(exact_by_layer[layer_id])
        exact_thr = exact_thresholds.get(layer_id, sparsity.ATTENTION)
        ts.values[(layer_id, sparsity.ATTENTION)] = predictor_mod.retention_matched_threshold(
            pred_scores, exact_scores, exact_thr)
        retention[layer_id] = float((exact_scores >= exact_thr).mean())
        if (layer_id, sparsity.MLP) in exact_thresholds.values:
            ts.values[(layer_id, sparsity.MLP)] = exact_thresholds.get(layer_id, sparsity.MLP)
    return ts, retention


def save_predictors(path: Path, cfg: RunConfig, pairs, pred_thresholds,
                    retention: dict[int, float] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for layer_id, (p_q, p_k) in pairs.items():
        for p in (p_q, p_k):
            for name, arr in p.state_arrays().items():
                tensors[f"pred/L{layer_id}/{p.role}/{name}"] = arr
    meta = {
        "config_hash": cfg.config_hash(),
        "pred_thresholds": pred_thresholds.to_dict(),
        "target_retention": {str(k): v for k, v in (retention or {}).items()},
        "ranks": [cfg.predictor.r1, cfg.predictor.r2, cfg.predictor.d_pred],
        "pooling": cfg.predictor.pooling,
    }
    checkpoint.save_container(path, tensors, cfg.to_dict(), meta)


def load_predictors(out_dir: Path, cfg: RunConfig):
    path = out_dir / PREDICTORS_FILE
    if not path.exists():
        raise DependencyError(
            f"missing predictor artifact {path}; run the `train-predictors` step first")
    tensors, _, meta = checkpoint.load_container(path)
    if meta.get("config_hash") != cfg.config_hash():
        raise ContractError(
            "predictors were generated under a different configuration; "
            "rerun `train-predictors`")
    r1, r2, d_pred = meta["ranks"]
    rng = np.random.default_rng(0)
    pairs = {}
    for layer_id in range(cfg.model.n_layers):
        pair = []
        for role in ("q", "k"):
            p = predictor_mod.Predictor.create(
                rng, cfg.model.hidden_dim, r1, r2, d_pred, role, layer_id,
                dtype=cfg.model.np_dtype)
            state = {
                name.rsplit("/", 1)[1]: arr
                for name, arr in tensors.items()
                if name.startswith(f"pred/L{layer_id}/{role}/")
            }
            if not state:
                raise ContractError(f"predictor for layer {layer_id}/{role} missing")
            p.load_state_arrays(state)
            pair.append(p)
        pairs[layer_id] = tuple(pair)
    pred_thresholds = sparsity.ThresholdSet.from_dict(meta["pred_thresholds"])
    retention = {int(k): float(v) for k, v in meta.get("target_retention", {}).items()}
    return pairs, pred_thresholds, retention


# ---------------------------------------------------------------------------
# finetune


def run_finetune(
    cfg: RunConfig,
    out: str | None = None,
    *,
    dense: bool = False,
    retain_all: bool = False,
    collect_ledger: bool = True,
) -> metrics_mod.MetricsLog:
    out_dir = _out_dir(cfg, out)
    _save_config_snapshot(cfg, out_dir)
    train_seqs, eval_seqs = _load_shards(cfg)
    base = ensure_base(cfg, out_dir)
    led = ledger_mod.Ledger(enabled=collect_ledger)
    with ledger_mod.use(led):
        model = base
        for name, arr in model.state_arrays().items():
            led.retain_array(arr, ledger_mod.PARAMETERS, op=name)
        pairs = None
        if dense:
            source = None
        elif retain_all:
            neg_inf = float("-inf")
            ts = sparsity.ThresholdSet({
                (l, c): neg_inf
                for l in range(cfg.model.n_layers)
                for c in (sparsity.ATTENTION, sparsity.MLP)
            })
            source = model_mod.ExactPatternSource(
                model, ts, mlp_scoring=cfg.sparsity.mlp_scoring)
        else:
            pairs, pred_thresholds, retention = load_predictors(out_dir, cfg)
            model.attach_predictors(pairs)
            source = model_mod.PredictedPatternSource(
                model, pred_thresholds, mlp_scoring=cfg.sparsity.mlp_scoring,
                sink_first_block=cfg.sparsity.sink_first_block,
                pooling=cfg.predictor.pooling,
                target_retention=retention,
                recalibrate_every=cfg.predictor.recalibrate_every)

        opt = Adam(model.adapter_parameters(), lr=cfg.train.lr,
                   weight_decay=cfg.train.weight_decay)
        segments = cfg.segments_for(cfg.seq_len)
        log = metrics_mod.MetricsLog()
        baseline = led.live_bytes()
        for step in range(1, cfg.train.steps + 1):
            tokens, targets = train_seqs[(step - 1) % len(train_seqs)]
            t0 = time.perf_counter()
            loss, _ = model.forward_step(
                tokens, targets, pattern_source=source, segments=segments,
                fused=cfg.kernel.fused, fuse_projections=cfg.kernel.fuse_projections)
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            wall = time.perf_counter() - t0
            led.flag_leaks(baseline)
            eval_loss = eval_ppl = None
            if cfg.train.eval_every and step % cfg.train.eval_every == 0:
                eval_loss = _mean_eval_loss(
                    model, eval_seqs, source, segments, cfg.train.eval_batches)
                eval_ppl = metrics_mod.perplexity(eval_loss)
            fractions = source.last_fractions if source is not None else {}
            log.append(metrics_mod.MetricsRecord(
                step=step,
                loss=float(loss.data),
                eval_loss=eval_loss,
                eval_ppl=eval_ppl,
                retained_attn={l: f for (l, c), f in fractions.items()
                               if c == sparsity.ATTENTION},
                retained_mlp={l: f for (l, c), f in fractions.items()
                              if c == sparsity.MLP},
                peak_bytes=led.peak_total,
                activation_peak_bytes=led.peak_by_category[ledger_mod.ACTIVATION],
                wall_s=wall,
            ))
        final_eval = _mean_eval_loss(model, eval_seqs, source, segments,
                                     cfg.train.eval_batches)

    log.write_csv(out_dir / METRICS_CSV)
    log.write_json(out_dir / METRICS_JSON)
    report = led.report()
    (out_dir / LEDGER_REPORT).write_text(json.dumps({
        "peak_total_bytes": report.peak_total_bytes,
        "peak_by_category": report.peak_by_category,
        "peak_by_site": report.peak_by_site,
        "activation_bytes_by_site": report.activation_bytes_by_site,
        "marks": report.marks,
        "leaked_bytes": report.leaked_bytes,
        "final_eval_loss": final_eval,
        "final_eval_ppl": metrics_mod.perplexity(final_eval),
        "mode": "dense" if dense else ("retain_all" if retain_all else "predicted"),
    }, indent=2) + "\n")
    metrics_mod.write_rows_csv(out_dir / LEDGER_CSV, [
        {"event": i, "live_bytes": live} for i, live in report.series[::max(1, len(report.series) // 5000)]
    ])

    tensors = model.state_arrays()
    if pairs is not None:
        for layer_id, (p_q, p_k) in pairs.items():
            for p in (p_q, p_k):
                for name, arr in p.state_arrays().items():
                    tensors[f"pred/L{layer_id}/{p.role}/{name}"] = arr
    checkpoint.save_container(
        out_dir / FINAL_CKPT, tensors, cfg.to_dict(),
        {"config_hash": cfg.config_hash(), "final_eval_loss": final_eval})
    return log


# ---------------------------------------------------------------------------
# bench / report


def run_bench(cfg: RunConfig, out: str | None = None) -> list[dict]:
    out_dir = _out_dir(cfg, out)
    rows = kernels.bench_kernels()
    metrics_mod.write_rows_csv(out_dir / BENCH_CSV, rows)
    naive = {(r["s"], r["k_or_n"]): r["wall_ns"] for r in rows if r["kernel"] == "attn_naive"}
    for row in rows:
        if row["kernel"] == "attn_fused" and (row["s"], row["k_or_n"]) in naive:
            row["speedup_vs_naive"] = naive[(row["s"], row["k_or_n"])] / max(row["wall_ns"], 1)
    (out_dir / BENCH_JSON).write_text(json.dumps(rows, indent=1) + "\n")
    return rows


def run_report(run_dir: str | Path) -> dict:
    """Regenerate summaries from persisted artifacts alone."""
    run_dir = Path(run_dir)
    if not run_dir.exists():
        raise DependencyError(f"run directory {run_dir} does not exist")
    summary: dict = {"run_dir": str(run_dir)}
    metrics_path = run_dir / METRICS_CSV
    if metrics_path.exists():
        rows = metrics_mod.read_rows_csv(metrics_path)
        if rows:
            summary["steps"] = len(rows)
            summary["final_loss"] = float(rows[-1]["loss"])
            evals = [float(r["eval_loss"]) for r in rows if r.get("eval_loss")]
            if evals:
                summary["final_eval_loss"] = evals[-1]
            retained_cols = [c for c in rows[-1] if c.startswith("retained_")]
            summary["final_retained"] = {c: float(rows[-1][c]) for c in retained_cols
                                         if rows[-1][c] not in ("", None)}
    ledger_path = run_dir / LEDGER_REPORT
    if ledger_path.exists():
        summary["ledger"] = json.loads(ledger_path.read_text())
    bench_path = run_dir / BENCH_CSV
    if bench_path.exists():
        bench_rows = metrics_mod.read_rows_csv(bench_path)
        fused = {(r["s"], r["k_or_n"]): int(r["wall_ns"]) for r in bench_rows
                 if r["kernel"] == "attn_fused"}
        speedups = [
            int(r["wall_ns"]) / max(fused[(r["s"], r["k_or_n"])], 1)
            for r in bench_rows
            if r["kernel"] == "attn_naive" and (r["s"], r["k_or_n"]) in fused
        ]
        if speedups:
            summary["bench_mean_speedup"] = float(np.mean(speedups))
    curve_path = run_dir / PREDICTOR_CURVE_FILE
    if curve_path.exists():
        curve = metrics_mod.read_rows_csv(curve_path)
        if curve:
            summary["predictor_final_recall"] = float(curve[-1]["recall"])
            summary["predictor_final_params"] = int(curve[-1]["param_count"])
    report_dir = run_dir / "report"
    report_dir.mkdir(exist_ok=True)
    (report_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
