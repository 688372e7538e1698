"""Post-hoc protocols: leave-one-view-out importance, timepoint windows and
view-subset ablation, all evaluated on a fixed checkpoint."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data.catalog import MISSING_LABEL, Dataset
from .model import Batch, UnifiedModel
from .trainer import Checkpoint, evaluate, restrict_views

log = logging.getLogger(__name__)


def _model(model) -> UnifiedModel:
    return model.build_model() if isinstance(model, Checkpoint) else model


def _check_labelled(ds: Dataset) -> None:
    if ds.n_patients == 0:
        raise ValueError("dataset split is empty")
    if not (ds.labels != MISSING_LABEL).any():
        raise ValueError("dataset split has no labels")


# ---------------------------------------------------------------- importance

@dataclass
class ImportanceReport:
    """Per-sample most influential view plus class-wise aggregates.

    ``excluded_scores[i, a]`` is the gold-label probability with view ``a``
    removed (NaN where ``a`` was unavailable for sample ``i``).
    """

    views: list[str]
    class_count: int
    sample_ids: list[str]
    labels: np.ndarray
    positions: np.ndarray
    full_scores: np.ndarray
    excluded_scores: np.ndarray
    most_influential: np.ndarray
    tie_count: int
    degenerate_count: int
    skipped: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def counts(self) -> np.ndarray:
        """(classes, views) count of samples naming each view."""
        out = np.zeros((self.class_count, len(self.views)), dtype=np.int64)
        np.add.at(out, (self.labels, self.most_influential), 1)
        return out

    def overall(self) -> np.ndarray:
        if self.n == 0:
            raise ValueError("no samples in importance report")
        return self.counts().sum(axis=0) / self.n

    def heatmap(self) -> np.ndarray:
        """Rows normalized by class instance counts; classes without samples
        give a row of NaN."""
        c = self.counts().astype(np.float64)
        totals = c.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, c / totals, np.nan)

    def fraction(self, view: str) -> float:
        return float(self.overall()[self.views.index(view)])

    def to_json(self) -> dict:
        return {
            "views": self.views,
            "n": self.n,
            "overall": dict(zip(self.views, self.overall().tolist())),
            "counts": self.counts().tolist(),
            "heatmap": [[None if np.isnan(x) else x for x in row] for row in self.heatmap().tolist()],
            "ties": self.tie_count,
            "degenerate_ties": self.degenerate_count,
            "skipped": self.skipped,
            "samples": [
                {"id": sid, "label": int(y), "position": int(p), "view": self.views[m]}
                for sid, y, p, m in zip(self.sample_ids, self.labels, self.positions,
                                        self.most_influential)
            ],
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view", "fraction", "count"])
        for v, frac, cnt in zip(self.views, self.overall(), self.counts().sum(axis=0)):
            w.writerow([v, repr(float(frac)), int(cnt)])
        return buf.getvalue()

    def plot_data(self) -> dict:
        """x/y series for an external bar chart and heatmap."""
        return {"bar": {"x": self.views, "y": self.overall().tolist()},
                "heatmap": {"x": self.views, "y": list(range(self.class_count)),
                            "z": self.to_json()["heatmap"]}}


def last_labelled_position(labels: np.ndarray) -> np.ndarray:
    """Index of the last labelled timepoint per patient (-1 if none)."""
    labelled = labels != MISSING_LABEL
    last = labels.shape[1] - 1 - np.argmax(labelled[:, ::-1], axis=1)
    return np.where(labelled.any(axis=1), last, -1)


def _probs_all(model: UnifiedModel, ds: Dataset, available: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    with T.no_grad():
        for lo in range(0, ds.n_patients, batch_size):
            idx = np.arange(lo, min(lo + batch_size, ds.n_patients))
            logits = model(Batch.from_dataset(ds, idx, available[idx]))
            out.append(T.softmax(logits).data.astype(np.float64))
    return np.concatenate(out)


def view_importance(model, ds: Dataset, score: str = "gold_prob",
                    batch_size: int = 256) -> ImportanceReport:
    """Remove each available view in turn (at every timepoint) and name the
    view whose removal lowers the gold-label probability most.

    Each patient is scored at its last labelled timepoint.  A view counts as
    available if present at any timepoint; patients with fewer than two
    available views are skipped.  Equal scores resolve to the lowest view
    index.
    """
    if score != "gold_prob":
        raise ValueError(f"unknown importance score {score!r}")
    _check_labelled(ds)
    model = _model(model)
    n_views = ds.catalog.n_views
    pos = last_labelled_position(ds.labels)
    has_view = ds.available.any(axis=1)  # (P, n)
    usable = (pos >= 0) & (has_view.sum(axis=1) >= 2)
    skipped = [pid for pid, ok in zip(ds.patient_ids, usable) if not ok]
    if skipped:
        log.info("view_importance: skipped %d samples with < 2 available views or no label", len(skipped))
    if not usable.any():
        raise ValueError("no sample has two or more available views")
    sub = ds.subset(usable)
    pos = pos[usable]
    has_view = has_view[usable]
    rows = np.arange(sub.n_patients)
    gold = sub.labels[rows, pos]

    def gold_prob(avail):
        return _probs_all(model, sub, avail, batch_size)[rows, pos, gold]

    full = gold_prob(sub.available)
    excluded = np.full((sub.n_patients, n_views), np.nan)
    for a in range(n_views):
        avail = sub.available.copy()
        avail[..., a] = False
        excluded[:, a] = np.where(has_view[:, a], gold_prob(avail), np.nan)

    masked = np.where(has_view, excluded, np.inf)
    best = np.argmin(masked, axis=1)  # first minimum -> lowest index on ties
    at_min = masked == masked[rows, best][:, None]
    ties = int((at_min.sum(axis=1) > 1).sum())
    degenerate = int((at_min == has_view).all(axis=1).sum())
    if ties:
        log.warning("view_importance: %d samples had tied exclusion scores (%d fully degenerate)",
                    ties, degenerate)
    return ImportanceReport(list(ds.catalog.names), ds.class_count, list(sub.patient_ids), gold, pos,
                            full, excluded, best, ties, degenerate, skipped)


# ---------------------------------------------------------------- windows and subsets

@dataclass(frozen=True)
class WindowSpec:
    start: int
    end: int

    def validate(self, timepoints: int) -> None:
        if not 0 <= self.start <= self.end < timepoints:
            raise ValueError(f"window {self.start}:{self.end} invalid for {timepoints} timepoints")

    @property
    def label(self) -> str:
        return f"{self.start}:{self.end}"

    @classmethod
    def parse(cls, text: str) -> "WindowSpec":
        try:
            lo, hi = text.split(":")
            return cls(int(lo), int(hi))
        except ValueError:
            raise ValueError(f"window {text!r} is not of the form X:Y") from None


def window_eval(model, ds: Dataset, windows: Sequence[WindowSpec | tuple[int, int]],
                batch_size: int = 256) -> dict[str, dict]:
    """Metrics at position Y using only inputs from timepoints X..Y.

    Earlier timepoints are cut from the decoder sequence rather than masked,
    and the kept positions keep their absolute positional embeddings.
    """
    if not windows:
        raise ValueError("no windows given")
    _check_labelled(ds)
    model = _model(model)
    out = {}
    for w in windows:
        w = w if isinstance(w, WindowSpec) else WindowSpec(*w)
        w.validate(ds.timepoints)
        out[w.label] = evaluate(model, ds, window=(w.start, w.end), batch_size=batch_size)
    return out


def parse_subsets(text: str) -> list[list[str]]:
    subsets = [[v.strip() for v in part.split(",") if v.strip()] for part in text.split(";")]
    if any(not s for s in subsets):
        raise ValueError(f"empty view subset in {text!r}")
    return subsets


def subset_eval(model, ds: Dataset, subsets: Sequence[Sequence[str]],
                batch_size: int = 256) -> dict[str, dict]:
    """Final-position metrics with every view outside each subset masked."""
    if not subsets:
        raise ValueError("no subsets given")
    _check_labelled(ds)
    model = _model(model)
    out = {}
    for s in subsets:
        if not s:
            raise ValueError("view subset must be nonempty")
        unknown = [v for v in s if v not in ds.catalog.names]
        if unknown:
            raise KeyError(f"views {unknown} not in catalog {list(ds.catalog.names)}")
        keep = [ds.catalog.index(v) for v in s]
        avail = restrict_views(ds.available, keep)
        out[",".join(s)] = evaluate(model, ds, avail, batch_size=batch_size)
    return out


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
