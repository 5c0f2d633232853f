"""Confusion matrices and per-class precision / recall / F1 reports.

Degenerate classes (no true members and never predicted) score 0 across
the board rather than NaN, which under-states rather than inflates
aggregate numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, LabelOutOfRange


def confusion_matrix(true_labels, predicted_labels, n_classes: int) -> np.ndarray:
    """counts[i, j] = number of examples with true class i predicted j."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"label sequences differ in length: {t.shape} vs {p.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    if t.size == 0:
        return cm
    if t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes:
        raise LabelOutOfRange(f"labels outside [0, {n_classes})")
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass(frozen=True)
class MetricsReport:
    class_names: tuple[str, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    accuracy: float
    macro_f1: float
    weighted_f1: float
    confusion: np.ndarray

    def as_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "precision": list(self.precision),
            "recall": list(self.recall),
            "f1": list(self.f1),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
            "confusion": self.confusion.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            class_names=tuple(d["class_names"]),
            precision=tuple(d["precision"]),
            recall=tuple(d["recall"]),
            f1=tuple(d["f1"]),
            accuracy=d["accuracy"],
            macro_f1=d["macro_f1"],
            weighted_f1=d["weighted_f1"],
            confusion=np.asarray(d["confusion"], dtype=np.int64),
        )


def per_class_metrics(cm: np.ndarray, class_names: tuple[str, ...] | None = None) -> MetricsReport:
    """Precision TP/(TP+FP), recall TP/(TP+FN), F1 their harmonic mean;
    0/0 cases resolve to 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no counts")
    n = cm.shape[0]
    if class_names is None:
        class_names = tuple(str(i) for i in range(n))

    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    support = cm.sum(axis=1)
    accuracy = float(tp.sum() / total)
    macro_f1 = float(f1.mean())
    weighted_f1 = float((f1 * support).sum() / total)
    return MetricsReport(
        class_names=tuple(class_names),
        precision=tuple(float(x) for x in precision),
        recall=tuple(float(x) for x in recall),
        f1=tuple(float(x) for x in f1),
        accuracy=accuracy,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
        confusion=cm,
    )


def confusion_row_percent(cm: np.ndarray) -> np.ndarray:
    """Row-normalized confusion matrix in percent; empty rows stay 0."""
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = np.where(sums > 0, 100.0 * cm / sums, 0.0)
    return pct


def render_report(report: MetricsReport, run_meta: dict | None = None) -> dict[str, str]:
    """Serialize a report in every output form at once.

    Returns a mapping of artifact name to content: ``metrics.json``
    (machine-readable, round-trips through :func:`parse_report`),
    ``metrics.txt`` (aligned columns, 4-decimal values), and two
    delimited confusion grids (raw counts and row percentages).
    """
    payload = {"metrics": report.as_dict(), "run": run_meta or {}}
    js = json.dumps(payload, sort_keys=True, indent=2)

    lines = []
    if run_meta:
        for key in sorted(run_meta):
            lines.append(f"# {key}: {run_meta[key]}")
    lines.append(f"{'class':<10}{'Pr':>10}{'Se':>10}{'F1':>10}{'support':>10}")
    support = report.confusion.sum(axis=1)
    for i, name in enumerate(report.class_names):
        lines.append(
            f"{name:<10}{report.precision[i]:>10.4f}{report.recall[i]:>10.4f}"
            f"{report.f1[i]:>10.4f}{int(support[i]):>10d}"
        )
    lines.append("")
    lines.append(f"accuracy     {report.accuracy:.4f}")
    lines.append(f"macro-F1     {report.macro_f1:.4f}")
    lines.append(f"weighted-F1  {report.weighted_f1:.4f}")
    txt = "\n".join(lines) + "\n"

    counts = "\n".join("\t".join(str(int(v)) for v in row) for row in report.confusion) + "\n"
    pct = confusion_row_percent(report.confusion)
    pct_txt = "\n".join("\t".join(f"{v:.2f}" for v in row) for row in pct) + "\n"

    return {
        "metrics.json": js,
        "metrics.txt": txt,
        "confusion_counts.tsv": counts,
        "confusion_rowpct.tsv": pct_txt,
    }


def parse_report(js: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(js)["metrics"])
