"""Accuracy and retention reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..checkpoint import Checkpoint, atomic_write_bytes
from . import mlp
from .tasks import Dataset


@dataclass
class EvalReport:
    model_tag: str
    accuracy: dict[str, float]
    retention: dict[str, float] = field(default_factory=dict)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values()))) if self.accuracy else 0.0

    @property
    def mean_retention(self) -> float | None:
        return float(np.mean(list(self.retention.values()))) if self.retention else None

    def wins(self, reference: Mapping[str, float]) -> int:
        """Tasks on which this model beats the reference (expert) accuracy."""
        return sum(1 for t, a in self.accuracy.items() if t in reference and a > reference[t])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "accuracy", "retention"])
        for task, acc in self.accuracy.items():
            ret = self.retention.get(task)
            w.writerow([task, f"{acc:.6f}", "" if ret is None else f"{ret:.6f}"])
        w.writerow(["mean", f"{self.mean_accuracy:.6f}",
                    "" if self.mean_retention is None else f"{self.mean_retention:.6f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))


def accuracy(model: Checkpoint, ds: Dataset) -> float:
    pred = mlp.predict(mlp.params_of(model), model.manifest, ds.inputs)
    return float(np.mean(pred == ds.labels))


def evaluate(model: Checkpoint, datasets: Sequence[Dataset],
             expert_accuracy: Mapping[str, float] | None = None, tag: str | None = None) -> EvalReport:
    """Argmax accuracy per task; retention against ``expert_accuracy`` when given."""
    acc = {ds.task_id: accuracy(model, ds) for ds in datasets}
    retention = {}
    if expert_accuracy:
        retention = {t: a / expert_accuracy[t] for t, a in acc.items()
                     if expert_accuracy.get(t, 0.0) > 0}
    return EvalReport(model.source_tag if tag is None else tag, acc, retention)
