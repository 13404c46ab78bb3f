"""Per-step metric records and CSV/JSON emission."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractError


@dataclass
class MetricsRecord:
    step: int
    loss: float
    eval_loss: float | None = None
    eval_ppl: float | None = None
    retained_attn: dict[int, float] = field(default_factory=dict)
    retained_mlp: dict[int, float] = field(default_factory=dict)
    predictor_recall: float | None = None
    peak_bytes: int = 0
    activation_peak_bytes: int = 0
    wall_s: float = 0.0

    def flat(self) -> dict:
        row = {
            "step": self.step,
            "loss": self.loss,
            "eval_loss": self.eval_loss,
            "eval_ppl": self.eval_ppl,
            "predictor_recall": self.predictor_recall,
            "peak_bytes": self.peak_bytes,
            "activation_peak_bytes": self.activation_peak_bytes,
            "wall_s": self.wall_s,
        }
        for layer, frac in sorted(self.retained_attn.items()):
            row[f"retained_attn_l{layer}"] = frac
        for layer, frac in sorted(self.retained_mlp.items()):
            row[f"retained_mlp_l{layer}"] = frac
        return row


class MetricsLog:
    """Append-only metric stream, monotonically increasing by step."""

    def __init__(self):
        self.records: list[MetricsRecord] = []

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ContractError(
                f"metrics must be appended monotonically: step {record.step} "
                f"after {self.records[-1].step}"
            )
        self.records.append(record)

    def write_csv(self, path: str | Path) -> None:
        rows = [r.flat() for r in self.records]
        write_rows_csv(path, rows)

    def write_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps([r.flat() for r in self.records], indent=1) + "\n")


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_rows_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def perplexity(loss: float) -> float:
    return float(math.exp(min(loss, 30.0)))
