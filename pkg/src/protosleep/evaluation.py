"""Confusion matrices and per-class / overall agreement metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import NUM_CLASSES, STAGES
from .errors import ValidationError


@dataclass
class ConfusionMatrix:
    """Rows are actual classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def recall(self) -> np.ndarray:
        rows = self.counts.sum(1)
        return np.divide(np.diag(self.counts), rows, out=np.zeros(len(rows)), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    acc: float
    mf1: float
    kappa: float
    chance_agreement: float
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                s: {"precision": float(p), "recall": float(r), "f1": float(f)}
                for s, p, r, f in zip(STAGES, self.precision, self.recall, self.f1)
            },
            "acc": self.acc,
            "mf1": self.mf1,
            "kappa": self.kappa,
            "chance_agreement": self.chance_agreement,
            "undefined": list(self.undefined),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "precision", "recall", "f1"])
        for s, p, r, f in zip(STAGES, self.precision, self.recall, self.f1):
            w.writerow([s, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
        w.writerow(["overall_acc", f"{self.acc:.6f}", "", ""])
        w.writerow(["overall_mf1", f"{self.mf1:.6f}", "", ""])
        w.writerow(["overall_kappa", f"{self.kappa:.6f}", "", ""])
        return buf.getvalue()


def confusion(labels, predictions, num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    y = np.asarray(labels, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if len(y) != len(p):
        raise ValidationError(f"length mismatch: {len(y)} labels vs {len(p)} predictions")
    for name, v in (("label", y), ("prediction", p)):
        if v.size and (v.min() < 0 or v.max() >= num_classes):
            raise ValidationError(f"{name} outside 0..{num_classes - 1}")
    counts = np.bincount(y * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    c = np.asarray(cm.counts, dtype=np.float64)
    total = c.sum()
    if total == 0:
        raise ValidationError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    fp = c.sum(0) - tp
    fn = c.sum(1) - tp
    undefined: list[str] = []
    pre, rec, f1 = (np.zeros(len(c)) for _ in range(3))
    for i, stage in enumerate(STAGES[: len(c)]):
        pre[i] = _ratio(tp[i], tp[i] + fp[i], f"precision:{stage}", undefined)
        rec[i] = _ratio(tp[i], tp[i] + fn[i], f"recall:{stage}", undefined)
        f1[i] = _ratio(2 * pre[i] * rec[i], pre[i] + rec[i], f"f1:{stage}", undefined)
    acc = tp.sum() / total
    pe = float((c.sum(1) * c.sum(0)).sum() / total**2)
    kappa = 1.0 if pe == 1.0 else (acc - pe) / (1.0 - pe)
    return MetricsReport(pre, rec, f1, float(acc), float(f1.mean()), float(kappa), pe, undefined)


def metrics_json(cm: ConfusionMatrix, report: MetricsReport) -> str:
    return json.dumps({"confusion": cm.to_list(), **report.to_dict()}, indent=2) + "\n"
