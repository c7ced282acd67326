"""Evaluation: confusion matrix, per-class precision/recall/F1, weight
trajectories, and embedding dumps for external projection tools.

Zero-denominator metrics are reported as an explicit undefined marker
(None), never as 0 or NaN, and are excluded from aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ParamSet
from .datasynth import CLASS_NAMES, Dataset
from .errors import ContractError
from .model import forward_arrays
from .trainer import StepTrace


@dataclass
class ConfusionMatrix:
    """Counts with true classes on rows, predicted classes on columns."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError(f"ConfusionMatrix: counts must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ContractError("ConfusionMatrix: negative count")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, true_labels, predicted, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        for t, p in zip(np.asarray(true_labels), np.asarray(predicted)):
            counts[int(t), int(p)] += 1
        return cls(counts)


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class ClassReport:
    accuracy: float
    per_class: list[ClassMetrics]

    def class_names(self) -> list[str]:
        return [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class{c}"
                for c in range(len(self.per_class))]


def report_from_confusion(cm: ConfusionMatrix) -> ClassReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ContractError("report_from_confusion: empty confusion matrix")
    accuracy = float(np.trace(counts)) / float(total)
    per_class = []
    for c in range(cm.num_classes):
        tp = float(counts[c, c])
        predicted = float(counts[:, c].sum())
        support = float(counts[c, :].sum())
        precision = tp / predicted if predicted > 0 else None
        recall = tp / support if support > 0 else None
        if precision is None or recall is None or precision + recall == 0.0:
            f1 = None
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        per_class.append(ClassMetrics(precision=precision, recall=recall, f1=f1))
    return ClassReport(accuracy=accuracy, per_class=per_class)


def evaluate(theta: ParamSet, dataset: Dataset,
             num_classes: int = 3) -> tuple[ConfusionMatrix, ClassReport, np.ndarray]:
    """Pure evaluation pass: confusion matrix, metric report, and the
    penultimate-layer embeddings in dataset order."""
    if len(dataset) == 0:
        raise ContractError("evaluate: empty dataset")
    log_probs, embeddings = forward_arrays(theta, dataset.features)
    predicted = np.argmax(log_probs, axis=1)
    cm = ConfusionMatrix.from_predictions(dataset.labels, predicted, num_classes)
    return cm, report_from_confusion(cm), embeddings


def summarize_weight_trajectory(trace: Sequence[StepTrace], window: int = 1) -> list[dict]:
    """Mean per-class training weight per window of epochs, CSV-ready."""
    if not trace:
        raise ContractError("summarize_weight_trajectory: empty trace")
    if window < 1:
        raise ContractError("summarize_weight_trajectory: window must be >= 1")
    buckets: dict[int, list[np.ndarray]] = {}
    for row in trace:
        buckets.setdefault(row.epoch // window, []).append(row.omega_tr)
    out = []
    for bucket in sorted(buckets):
        mean = np.mean(buckets[bucket], axis=0)
        out.append({"epoch_start": bucket * window,
                    "omega_tr_mean": mean})
    return out


def write_weight_trajectory_csv(path, summary: Sequence[dict]) -> None:
    if not summary:
        raise ContractError("write_weight_trajectory_csv: empty summary")
    n_classes = len(summary[0]["omega_tr_mean"])
    lines = [",".join(["epoch_start"] + [f"omega_tr_c{c}" for c in range(n_classes)])]
    for row in summary:
        lines.append(",".join([str(row["epoch_start"])]
                              + [format(float(v), ".17g") for v in row["omega_tr_mean"]]))
    Path(path).write_text("\n".join(lines) + "\n")


def dump_embeddings(embeddings: np.ndarray, labels, path) -> None:
    """CSV of embeddings plus labels, bit-stable order and formatting."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2:
        raise ContractError(f"dump_embeddings: embeddings must be 2-D, got {embeddings.shape}")
    if embeddings.shape[0] != labels.shape[0]:
        raise ContractError(
            f"dump_embeddings: {embeddings.shape[0]} embeddings vs {labels.shape[0]} labels")
    width = embeddings.shape[1]
    lines = [",".join([f"dim_{j}" for j in range(width)] + ["label"])]
    for row, label in zip(embeddings, labels):
        lines.append(",".join([format(float(v), ".17g") for v in row] + [str(int(label))]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# report rendering


def _cell(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.4f}"


def render_report_text(report: ClassReport, cm: ConfusionMatrix) -> str:
    names = report.class_names()
    lines = [f"Accuracy: {report.accuracy:.4f}", ""]
    header = f"{'Class':<12}{'P':>12}{'R':>12}{'F1':>12}"
    lines.append(header)
    lines.append("-" * len(header))
    for name, m in zip(names, report.per_class):
        lines.append(f"{name:<12}{_cell(m.precision):>12}{_cell(m.recall):>12}{_cell(m.f1):>12}")
    lines.append("")
    lines.append("Confusion matrix (rows = true, cols = predicted):")
    for c, row in enumerate(cm.counts):
        lines.append(f"  {names[c]:<12}" + " ".join(f"{v:>6d}" for v in row))
    return "\n".join(lines) + "\n"


def render_report_csv(report: ClassReport) -> str:
    lines = ["metric,class,value", f"accuracy,,{report.accuracy:.17g}"]
    for c, m in enumerate(report.per_class):
        for metric, value in (("precision", m.precision), ("recall", m.recall), ("f1", m.f1)):
            cell = "" if value is None else format(value, ".17g")
            lines.append(f"{metric},{c},{cell}")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    """Inverse of render_report_csv; undefined cells come back as None."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "metric,class,value":
        raise ContractError("parse_report_csv: missing header")
    out: dict = {"accuracy": None, "per_class": {}}
    for ln in lines[1:]:
        metric, cls, value = ln.split(",")
        parsed = float(value) if value else None
        if metric == "accuracy":
            out["accuracy"] = parsed
        else:
            out["per_class"].setdefault(int(cls), {})[metric] = parsed
    return out
