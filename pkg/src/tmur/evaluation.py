"""Accuracy, probability/uncertainty calibration error and plot-ready bin tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from tmur.evidential import DomainError, batch_opinions


@dataclass(frozen=True)
class PredictionSet:
    predicted: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray
    uncertainty: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.predicted, self.labels, self.confidence, self.uncertainty)]
        n = arrays[0].shape[0]
        if any(a.shape != (n,) for a in arrays):
            raise DomainError("prediction arrays must be 1-D and equally long")
        for name, a in zip(("predicted", "labels", "confidence", "uncertainty"), arrays):
            object.__setattr__(self, name, a)

    @classmethod
    def from_evidence(cls, evidence: np.ndarray, labels) -> "PredictionSet":
        _, u, p = batch_opinions(evidence)
        return cls(np.argmax(p, axis=1), np.asarray(labels), p.max(axis=1), u)

    @property
    def correct(self) -> np.ndarray:
        return (self.predicted == self.labels).astype(np.float64)

    def __len__(self) -> int:
        return self.labels.shape[0]


def accuracy(preds: PredictionSet) -> float:
    if len(preds) == 0:
        raise DomainError("accuracy of an empty prediction set")
    return float(preds.correct.mean())


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    if bins < 1:
        raise DomainError("need at least one bin")
    idx = np.floor(np.clip(values, 0.0, 1.0) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1)


@dataclass(frozen=True)
class BinRow:
    lo: float
    hi: float
    count: int
    mean_axis: float
    accuracy: float


def reliability_table(preds: PredictionSet, axis: str = "confidence", bins: int = 15) -> list[BinRow]:
    """Equal-width bins over [0, 1] on confidence or uncertainty.

    Empty bins are reported with NaN mean/accuracy.
    """
    if axis not in ("confidence", "uncertainty"):
        raise DomainError(f"unknown reliability axis {axis!r}")
    values = preds.confidence if axis == "confidence" else preds.uncertainty
    idx = _bin_index(values, bins)
    correct = preds.correct
    rows = []
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        mean_axis = float(values[mask].mean()) if count else float("nan")
        acc = float(correct[mask].mean()) if count else float("nan")
        rows.append(BinRow(b / bins, (b + 1) / bins, count, mean_axis, acc))
    return rows


def _ece(rows: list[BinRow], n: int, reference) -> float:
    total = 0.0
    for r in rows:
        if r.count:
            total += r.count / n * abs(r.accuracy - reference(r.mean_axis))
    return total


def prob_ece(preds: PredictionSet, bins: int = 15) -> float:
    """ECE of the max predictive probability."""
    return _ece(reliability_table(preds, "confidence", bins), len(preds), lambda c: c)


def u_ece(preds: PredictionSet, bins: int = 15) -> float:
    """ECE of uncertainty, taking ``1 - mean u`` of a bin as its expected accuracy."""
    return _ece(reliability_table(preds, "uncertainty", bins), len(preds), lambda u: 1.0 - u)


def uncertainty_histogram(preds: PredictionSet, bins: int = 15) -> list[tuple[float, float, int]]:
    counts = np.bincount(_bin_index(preds.uncertainty, bins), minlength=bins)
    return [(b / bins, (b + 1) / bins, int(c)) for b, c in enumerate(counts)]


@dataclass
class MetricsReport:
    accuracy: float
    prob_ece: float
    u_ece: float
    mean_uncertainty: float
    bins: int
    confidence_table: list[BinRow] = field(default_factory=list)
    uncertainty_table: list[BinRow] = field(default_factory=list)
    histogram: list[tuple[float, float, int]] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "prob_ece": self.prob_ece,
            "u_ece": self.u_ece,
            "mean_uncertainty": self.mean_uncertainty,
        }


def evaluate(preds: PredictionSet, bins: int = 15) -> MetricsReport:
    return MetricsReport(
        accuracy=accuracy(preds),
        prob_ece=prob_ece(preds, bins),
        u_ece=u_ece(preds, bins),
        mean_uncertainty=float(preds.uncertainty.mean()),
        bins=bins,
        confidence_table=reliability_table(preds, "confidence", bins),
        uncertainty_table=reliability_table(preds, "uncertainty", bins),
        histogram=uncertainty_histogram(preds, bins),
    )


def predictions(model, views, labels) -> PredictionSet:
    """Fused-opinion predictions of ``model`` on standardised ``views``."""
    return PredictionSet.from_evidence(model.forward(views).fused.data, labels)


def expert_predictions(model, views, labels) -> list[PredictionSet]:
    """One prediction set per expert (private experts first, collaborative last)."""
    return [PredictionSet.from_evidence(e.data, labels) for e in model.forward(views).evidence]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def table_csv(rows: list[BinRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count", "mean_axis", "accuracy"])
    for r in rows:
        w.writerow([_fmt(r.lo), _fmt(r.hi), r.count, _fmt(r.mean_axis), _fmt(r.accuracy)])
    return buf.getvalue()


def histogram_csv(hist: list[tuple[float, float, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in hist:
        w.writerow([_fmt(lo), _fmt(hi), c])
    return buf.getvalue()


def metrics_text(values: dict) -> str:
    """``key=value`` lines in insertion order."""
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())
