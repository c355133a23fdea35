"""Evaluation report artifacts: accuracy figure, per-class confidence table,
confusion matrix CSV, and the per-epoch training report."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from divegest.dataset import LabeledDataset
from divegest.train import DEFAULT_MEAN, DEFAULT_STD, TrainReport, normalize

CONFIDENCE_NOTE = ("# confidence = mean softmax probability of the true class, "
                   "averaged over all test samples of that class")


def format_accuracy_pct(accuracy: float) -> str:
    """Accuracy fraction as a two-decimal percent string."""
    return f"{100.0 * accuracy:.2f}"


def confidence_table(model, data: LabeledDataset, *,
                     mean=DEFAULT_MEAN, std=DEFAULT_STD,
                     batch_size: int = 64) -> list[tuple[str, Optional[float]]]:
    """Per-class mean true-class softmax probability, in vocabulary order.

    Classes with no test samples report None. ``model`` needs only
    ``probs_batch`` and ``vocab``.
    """
    k = len(model.vocab)
    totals = np.zeros(k, dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for start in range(0, len(data), batch_size):
        images = data.images[start:start + batch_size]
        labels = data.labels[start:start + batch_size]
        batch = np.stack([normalize(im, mean, std) for im in images])
        probs = model.probs_batch(batch)
        for lbl, row in zip(labels, probs):
            totals[lbl] += row[lbl]
            counts[lbl] += 1
    return [(model.vocab[i], totals[i] / counts[i] if counts[i] else None)
            for i in range(k)]


def write_confidence_csv(path, rows: Sequence[tuple[str, Optional[float]]]) -> None:
    """17-row table, vocabulary order, confidence as percent with three decimals."""
    lines = [CONFIDENCE_NOTE, "class,confidence_pct"]
    for name, value in rows:
        lines.append(f"{name}," if value is None else f"{name},{100.0 * value:.3f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion_csv(path, confusion: np.ndarray) -> None:
    """KxK integer matrix, rows true class, columns predicted class."""
    lines = [",".join(str(int(v)) for v in row) for row in confusion]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_confusion_csv(path) -> np.ndarray:
    rows = [[int(v) for v in line.split(",")]
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
    return np.array(rows, dtype=np.int64)


def write_train_report_csv(path, report: TrainReport) -> None:
    """Per-epoch lr/loss/accuracy rows; wall time stays out of this file."""
    lines = ["epoch,lr,loss,train_acc"]
    for rec in report.epochs:
        lines.append(f"{rec.epoch},{rec.lr:.12g},{rec.loss:.10f},{rec.train_acc:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
