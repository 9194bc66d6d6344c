"""Classification metrics over time: per-step confusion scores, earliness and consistency weighting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

THRESHOLD = 0.5


def hard_labels(scores) -> np.ndarray:
    return (np.asarray(scores, dtype=float) >= THRESHOLD).astype(int)


def confusion_metrics(preds, labels) -> tuple[float, float, float, float]:
    """``(accuracy, precision, recall, f1)`` with zero for empty denominators."""
    p = np.asarray(preds, dtype=int)
    y = np.asarray(labels, dtype=int)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("no predictions")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    acc = float(np.mean(p == y))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def f1_early(f1s: Sequence[float], n: int | None = None) -> float:
    """F1 averaged with weights ``1/sqrt(i)`` over the first ``n`` steps."""
    f1s = np.asarray(f1s, dtype=float)
    n = len(f1s) if n is None else n
    if n < 1 or n > len(f1s):
        raise ValueError(f"need 1 <= n <= {len(f1s)}")
    w = 1.0 / np.sqrt(np.arange(1, n + 1))
    return float(np.dot(w, f1s[:n]) / w.sum())


def consistency_fractions(scores: np.ndarray) -> np.ndarray:
    """For each adjacent pair of steps, the fraction of samples whose
    ``score - 0.5`` keeps a strictly positive product. ``scores`` is ``(samples, N)``."""
    s = np.asarray(scores, dtype=float) - THRESHOLD
    if s.ndim != 2 or s.shape[1] < 2:
        raise ValueError("scores must be (samples, N) with N >= 2")
    return np.mean(s[:, :-1] * s[:, 1:] > 0, axis=0)


def f1_consistent(f1s: Sequence[float], scores=None, n: int | None = None, consistency=None) -> float:
    """F1 over steps ``1..n-1`` weighted by ``sqrt(i)`` and by the step's consistency.

    Either pass the ``(samples, N)`` score matrix or precomputed per-step
    ``consistency`` fractions of length ``n - 1``.
    """
    f1s = np.asarray(f1s, dtype=float)
    if consistency is None:
        if scores is None:
            raise ValueError("need scores or consistency")
        consistency = consistency_fractions(scores)
    consistency = np.asarray(consistency, dtype=float)
    n = len(consistency) + 1 if n is None else n
    if n < 2:
        raise ValueError("need at least two steps")
    if len(consistency) < n - 1 or len(f1s) < n - 1:
        raise ValueError("series shorter than n - 1")
    w = np.sqrt(np.arange(1, n))
    return float(np.sum(w * f1s[: n - 1] * consistency[: n - 1]) / w.sum())


def first_confident_time(scores: Sequence[float], label: int, horizon: int | None = None) -> int | None:
    """Smallest 1-based step from which every hard label up to the horizon is correct."""
    pred = hard_labels(scores)
    horizon = len(pred) if horizon is None else horizon
    if horizon > len(pred):
        raise ValueError("series does not cover the horizon")
    t = None
    for i in range(horizon, 0, -1):
        if pred[i - 1] != label:
            break
        t = i
    return t


@dataclass
class MetricsReport:
    per_step: list[tuple[float, float, float, float]]
    f1_early: float
    f1_consistent: float
    mean_first_confident: float  # over samples that ever become confident; nan if none

    @property
    def final_f1(self) -> float:
        return self.per_step[-1][3]


def evaluate_scores(scores: np.ndarray, labels: Sequence[int]) -> MetricsReport:
    """Full report from a ``(samples, N)`` survival score matrix."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    preds = hard_labels(scores)
    per_step = [confusion_metrics(preds[:, t], labels) for t in range(scores.shape[1])]
    f1s = [m[3] for m in per_step]
    fct = [first_confident_time(scores[i], int(labels[i])) for i in range(len(labels))]
    hit = [x for x in fct if x is not None]
    f1c = f1_consistent(f1s, scores) if scores.shape[1] >= 2 else f1s[0]
    return MetricsReport(per_step, f1_early(f1s), f1c, float(np.mean(hit)) if hit else math.nan)


def dump_report(report: MetricsReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestep", "acc", "prec", "rec", "f1"])
        for t, row in enumerate(report.per_step, start=1):
            w.writerow([t, *(f"{v:.6f}" for v in row)])
        w.writerow(["summary", "F1E", "F1C", "mean_tfc", ""])
        w.writerow(["summary", f"{report.f1_early:.6f}", f"{report.f1_consistent:.6f}", f"{report.mean_first_confident:.6f}", ""])
