"""Run configuration: nested dataclasses, JSON round trip, full defaulting.

A run is reproducible from config + seed alone.  The sparsity-relevant
subset of the model configuration is hashed into every pipeline artifact so
later stages can refuse inputs produced under an incompatible geometry.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .model import ModelConfig


@dataclass
class SparsityConfig:
    sink_first_block: bool = False
    mlp_scoring: bool = True
    threshold_eps: float | None = None  # default: 0.05*|T| + 1e-3
    threshold_eta: float | None = None  # default: capped so one round moves <= 10%
    tune_rounds: int = 1
    profile_batches: int = 8


@dataclass
class PredictorConfig:
    r1: int = 16  # h/4 at the default hidden dim
    r2: int = 16
    d_pred: int = 16
    pooling: str = "mean"  # "mean" | "token"
    epochs: int = 300
    lr: float = 1e-2
    teacher_batches: int = 48
    val_batches: int = 8
    log_scale: bool = True
    prune_target: float = 0.5
    prune_every: int = 50
    prune_step: float = 0.10
    refresh_interval: int = 0  # 0 = train once offline
    recalibrate_every: int = 50  # steps between predicted-threshold re-inits (0 = off)


@dataclass
class KernelConfig:
    fused: bool = True
    fuse_projections: bool = True
    segments: int = 0  # 0 = auto: 8 when seq len >= 1024, else 1


@dataclass
class TrainConfig:
    steps: int = 500
    warmup_steps: int = 0  # dense steps establishing the base before profiling
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 50
    eval_batches: int = 4
    eval_fraction: float = 0.1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sparsity: SparsityConfig = field(default_factory=SparsityConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str = ""
    out: str = "runs/default"
    seq_len: int = 512
    tokenizer: str = "bytes"

    def segments_for(self, seq_len: int) -> int:
        if self.kernel.segments > 0:
            return self.kernel.segments
        return 8 if seq_len >= 1024 else 1

    def config_hash(self) -> str:
        """Hash of the fields that pattern artifacts depend on."""
        m = self.model
        key = json.dumps({
            "block_size": m.block_size,
            "n_layers": m.n_layers,
            "hidden_dim": m.hidden_dim,
            "n_heads": m.n_heads,
            "vocab_size": m.vocab_size,
            "mlp_variant": m.mlp_variant,
            "mlp_dim": m.mlp_dim,
            "positions": m.positions,
            "mlp_scoring": self.sparsity.mlp_scoring,
        }, sort_keys=True)
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        sections = {
            "model": ModelConfig,
            "sparsity": SparsityConfig,
            "predictor": PredictorConfig,
            "kernel": KernelConfig,
            "train": TrainConfig,
        }
        kwargs: dict = {}
        for key, value in raw.items():
            if key in sections:
                cls = sections[key]
                known = {f.name for f in dataclasses.fields(cls)}
                unknown = set(value) - known
                if unknown:
                    raise DataError(f"unknown {key} config keys: {sorted(unknown)}")
                kwargs[key] = cls(**value)
            elif key in ("corpus", "out", "seq_len", "tokenizer"):
                kwargs[key] = value
            else:
                raise DataError(f"unknown config section {key!r}")
        return RunConfig(**kwargs)

    @staticmethod
    def from_file(path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"config {path} is not valid JSON: {exc}") from exc
        return RunConfig.from_dict(raw)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
