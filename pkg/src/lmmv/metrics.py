"""Ranking and accuracy metrics with explicit tie conventions, plus seed
aggregation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class MetricUndefined(ValueError):
    """The metric is not defined for this input (e.g. a single class)."""


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    return s, y.astype(bool)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: sum over distinct thresholds (descending) of
    recall increment times precision, so tied scores share one precision."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefined("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # last index of each tie group
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counting one half (Mann-Whitney)."""
    s, y = _binary_inputs(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("ROC AUC needs both classes")
    neg = np.sort(s[~y])
    pos = s[y]
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    # integer-valued numerator keeps the sum exact
    u2 = 2 * int(below.sum()) + int(ties.sum())
    return u2 / (2.0 * n_pos * n_neg)


def macro_accuracy(predictions, labels, class_count: int | None = None) -> float:
    """Unweighted mean of per-class recall over classes present in ``labels``."""
    p = np.asarray(predictions).ravel()
    y = np.asarray(labels).ravel()
    if y.size == 0:
        raise MetricUndefined("macro accuracy needs labels")
    classes = np.unique(y)
    if class_count is not None and (classes.max() >= class_count or classes.min() < 0):
        raise ValueError(f"labels outside 0..{class_count - 1}")
    return float(np.mean([np.mean(p[y == c] == c) for c in classes]))


def one_vs_rest(metric: Callable, probs, labels) -> float:
    """Macro average of ``metric`` over classes, each scored by its own
    probability column against the rest.  Two-class input reduces to the
    binary metric on column 1.  Classes without positives are skipped."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if probs.ndim != 2 or probs.shape[0] != y.size:
        raise ValueError(f"probability matrix {probs.shape} does not match {y.size} labels")
    if probs.shape[1] == 2:
        return metric(probs[:, 1], y == 1)
    vals = []
    for c in range(probs.shape[1]):
        pos = y == c
        if not pos.any():
            log.info("one_vs_rest: class %d has no positives, skipped", c)
            continue
        vals.append(metric(probs[:, c], pos))
    if not vals:
        raise MetricUndefined("no class has positives")
    return float(np.mean(vals))


@dataclass
class SeedAggregate:
    mean: float
    std: float | None
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.4f}" if self.std is None else f"{self.mean:.4f} ± {self.std:.4f}"


def aggregate_seeds(values: Sequence[float]) -> SeedAggregate:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate_seeds needs at least one value")
    std = float(np.std(v, ddof=1)) if v.size >= 2 else None
    return SeedAggregate(float(v.mean()), std, int(v.size))


def evaluate_probs(probs, labels) -> dict[str, float]:
    """AP, ROC AUC and macro accuracy for a (samples, classes) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return {
        "ap": one_vs_rest(average_precision, probs, labels),
        "roc": one_vs_rest(roc_auc, probs, labels),
        "macro_acc": macro_accuracy(probs.argmax(axis=1), labels, probs.shape[1]),
        "n": int(labels.size),
        "prevalence": float(np.mean(labels == 1)) if probs.shape[1] == 2 else math.nan,
    }


@dataclass
class EvalReport:
    """Rows of per-(configuration, seed) metrics with mean ± std by configuration."""

    rows: list[dict] = field(default_factory=list)
    metrics: tuple[str, ...] = ("ap", "roc", "macro_acc")

    def add(self, config: str, seed: int, values: dict, **meta) -> None:
        row = {"config": config, "seed": seed}
        row.update(meta)
        row.update({k: values[k] for k in self.metrics})
        row["n"] = values.get("n")
        self.rows.append(row)

    def configs(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["config"] not in seen:
                seen.append(r["config"])
        return seen

    def aggregate(self) -> dict[str, dict[str, SeedAggregate]]:
        out = {}
        for c in self.configs():
            rs = [r for r in self.rows if r["config"] == c]
            out[c] = {m: aggregate_seeds([r[m] for r in rs]) for m in self.metrics}
        return out

    def to_json(self) -> dict:
        agg = {c: {m: {"mean": a.mean, "std": a.std, "n": a.n} for m, a in ms.items()}
               for c, ms in self.aggregate().items()}
        return {"rows": self.rows, "aggregate": agg}
