"""Binary classification metrics with attack as the positive class."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .ensemble import EnsembleModel, as_xy


@dataclass
class ClassifierMetrics:
    accuracy: float
    recall: float
    precision: float
    f1: float
    mean_latency: float = 0.0
    model: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(y_true, y_pred) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn)"""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    return tp, fp, fn, tn


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int, latency: float = 0.0, model: str = "") -> ClassifierMetrics:
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassifierMetrics(accuracy, recall, precision, f1, latency, model)


def measure_latency(model: EnsembleModel, X, repeats: int = 100) -> float:
    """Median wall-clock time of a single-sample prediction."""
    X = np.asarray(X, dtype=float)
    rows = [list(X[i % len(X)]) for i in range(repeats)]
    times = []
    for x in rows:
        t0 = time.perf_counter()
        model.proba_one(x)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def evaluate_classifier(model: EnsembleModel, test, name: str = "", latency_repeats: int = 100) -> ClassifierMetrics:
    X, y = as_xy(test)
    prob = model.predict_proba(X)
    pred = prob >= 0.5
    latency = measure_latency(model, X, latency_repeats) if latency_repeats else 0.0
    return metrics_from_counts(*confusion(y, pred), latency=latency, model=name or model.kind)
