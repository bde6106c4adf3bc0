"""Confusion counts, Accuracy/Recall/Precision/F1 and table rendering.

The positive class is ``aligned``. Percentages are on a 0-100 scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

__all__ = [
    "POSITIVE",
    "Confusion",
    "MetricsReport",
    "RATED_DIMENSIONS",
    "confusion_from",
    "compute_metrics",
    "implied_precision",
    "render_report",
]

POSITIVE = "aligned"
NEGATIVE = "misaligned"

# (attribute, column header) in table order
RATED_DIMENSIONS = (
    ("familiarity", "Familiarity"),
    ("emotional_valence", "Emotional Valence"),
    ("emotional_arousal", "Emotional Arousal"),
    ("semantic_accuracy", "Semantic Accuracy"),
)
SCORE_COLUMNS = (("accuracy", "Accuracy(%)"), ("recall", "Recall(%)"), ("f1", "F1-score(%)"))


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsReport:
    model: str
    accuracy: float
    recall: float
    precision: float
    f1: float
    familiarity: float | None = None
    emotional_valence: float | None = None
    emotional_arousal: float | None = None
    semantic_accuracy: float | None = None
    # names of metrics whose denominator was zero (reported as 0)
    degenerate: frozenset[str] = field(default_factory=frozenset)

    @property
    def has_ratings(self) -> bool:
        return any(getattr(self, attr) is not None for attr, _ in RATED_DIMENSIONS)


def confusion_from(predictions: Sequence[str], labels: Sequence[str]) -> Confusion:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    tp = fp = fn = tn = 0
    for pred, gold in zip(predictions, labels):
        for v in (pred, gold):
            if v not in (POSITIVE, NEGATIVE):
                raise ValueError(f"label must be {POSITIVE!r} or {NEGATIVE!r}, got {v!r}")
        if gold == POSITIVE:
            if pred == POSITIVE:
                tp += 1
            else:
                fn += 1
        elif pred == POSITIVE:
            fp += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


def compute_metrics(c: Confusion, model: str = "", **ratings) -> MetricsReport:
    if c.total < 1:
        raise ValueError("confusion matrix is empty")
    degenerate = set()

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.add(name)
            return 0.0
        return 100.0 * num / den

    accuracy = ratio(c.tp + c.tn, c.total, "accuracy")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    if precision + recall == 0.0:
        degenerate.add("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return MetricsReport(model, accuracy, recall, precision, f1, degenerate=frozenset(degenerate), **ratings)


def implied_precision(recall: float, f1: float) -> float:
    """Precision recovered from Recall and F1 by inverting the harmonic mean."""
    den = 2 * recall - f1
    if den <= 0:
        raise ValueError(f"no precision is consistent with recall={recall}, f1={f1}")
    return f1 * recall / den


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.2f}"


def render_report(reports: Sequence[MetricsReport], format: str = "markdown") -> str:
    """Render in the layout of the benchmark tables.

    The wide layout (rated dimensions first) is used when any report carries
    ratings; otherwise only Accuracy, Recall and F1 are shown.
    """
    if not reports:
        raise ValueError("nothing to render")
    cols = [("model", "LLM_Models")]
    if any(r.has_ratings for r in reports):
        cols += list(RATED_DIMENSIONS)
    cols += list(SCORE_COLUMNS)
    rows = [[r.model] + [_fmt(getattr(r, attr)) for attr, _ in cols[1:]] for r in reports]
    header = [title for _, title in cols]
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {format!r}")
