"""scikit-learn style wrapper around the trainer and model."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data.catalog import MISSING_LABEL, Dataset
from .metrics import average_precision, one_vs_rest
from .model import ModelConfig
from .trainer import (Checkpoint, TrainConfig, Trainer, predict_proba, restrict_views)


def check_dataset(X, catalog=None) -> Dataset:
    """Reject anything that is not a consistent Dataset (optionally one
    sharing ``catalog``)."""
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    X.validate()
    if X.n_patients == 0:
        raise ValueError("dataset has no patients")
    if catalog is not None and X.catalog.to_dict() != catalog.to_dict():
        raise ValueError("dataset views differ from the ones the estimator was fitted on")
    return X


def check_window(window, timepoints: int) -> tuple[int, int] | None:
    if window is None:
        return None
    lo, hi = (int(w) for w in window)
    if not 0 <= lo <= hi < timepoints:
        raise ValueError(f"window {lo}:{hi} invalid for {timepoints} timepoints")
    return lo, hi


class LongitudinalClassifier(ClassifierMixin, BaseEstimator):
    """Unified multi-view longitudinal classifier.

    ``fit`` takes a Dataset (labels travel with it).  Predictions are the
    class probabilities at the last timepoint of each patient's sequence,
    or of ``window`` when given.
    """

    def __init__(self, epochs: int = 30, batch_size: int = 64, seed: int = 0,
                 view_dropout: float = 0.5, lr: float = 1e-3, group_lr: dict | None = None,
                 weight_decay: float = 0.01, d_model: int = 64, heads: int = 4,
                 summarizer_layers: int = 2, decoder_layers: int = 2,
                 image_widths: Sequence[int] = (8, 16, 32), tabular_dim: int = 32,
                 views: Sequence[str] | None = None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.view_dropout = view_dropout
        self.lr = lr
        self.group_lr = group_lr
        self.weight_decay = weight_decay
        self.d_model = d_model
        self.heads = heads
        self.summarizer_layers = summarizer_layers
        self.decoder_layers = decoder_layers
        self.image_widths = image_widths
        self.tabular_dim = tabular_dim
        self.views = views

    def _configs(self) -> tuple[TrainConfig, ModelConfig]:
        kw = dict(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                  view_dropout=self.view_dropout, lr=self.lr, weight_decay=self.weight_decay)
        if self.group_lr is not None:
            kw["group_lr"] = self.group_lr
        mcfg = ModelConfig(d_model=self.d_model, heads=self.heads,
                           summarizer_layers=self.summarizer_layers,
                           decoder_layers=self.decoder_layers,
                           image_widths=tuple(self.image_widths), tabular_dim=self.tabular_dim)
        return TrainConfig(**kw), mcfg

    def fit(self, X: Dataset, y=None, X_val: Dataset | None = None):
        """Train on ``X``; ``y`` optionally overrides the (patients, timepoints) labels."""
        X = check_dataset(X)
        if y is not None:
            y = np.asarray(y)
            if y.shape != X.labels.shape:
                raise ValueError(f"y has shape {y.shape}, expected {X.labels.shape}")
            X = Dataset(X.catalog, X.class_count, X.obs, X.available, y.astype(np.int64),
                        X.patient_ids, X.split, X.meta)
            X.validate()
        if not (X.labels != MISSING_LABEL).any():
            raise ValueError("training data has no labels")
        if X_val is not None:
            X_val = check_dataset(X_val, X.catalog)
        tcfg, mcfg = self._configs()
        trainer = Trainer(X, tcfg, mcfg, X_val, views=self.views)
        self.checkpoint_, self.history_ = trainer.fit()
        self.model_ = self.checkpoint_.build_model()
        self.catalog_ = X.catalog
        self.classes_ = np.arange(X.class_count)
        self.n_views_ = X.catalog.n_views
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LongitudinalClassifier":
        t, m = ckpt.header["train"], ckpt.header["model"]
        est = cls(epochs=t["epochs"], batch_size=t["batch_size"], seed=t["seed"],
                  view_dropout=t["view_dropout"], lr=t["lr"], group_lr=t["group_lr"],
                  weight_decay=t["weight_decay"], d_model=m["d_model"], heads=m["heads"],
                  summarizer_layers=m["summarizer_layers"], decoder_layers=m["decoder_layers"],
                  image_widths=tuple(m["image_widths"]), tabular_dim=m["tabular_dim"],
                  views=ckpt.header["views"])
        est.checkpoint_ = ckpt
        est.model_ = ckpt.build_model()
        est.catalog_ = est.model_.catalog
        est.classes_ = np.arange(ckpt.header["class_count"])
        est.n_views_ = est.catalog_.n_views
        est.history_ = []
        return est

    def predict_proba(self, X: Dataset, views: Sequence[str] | None = None,
                      window=None) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_dataset(X, self.catalog_)
        window = check_window(window, X.timepoints)
        avail = X.available
        if views is not None:
            avail = restrict_views(avail, [X.catalog.index(v) for v in views])
        return predict_proba(self.model_, X, avail, window)

    def predict(self, X: Dataset, views=None, window=None) -> np.ndarray:
        return self.classes_[self.predict_proba(X, views, window).argmax(axis=1)]

    def score(self, X: Dataset, y=None, sample_weight=None) -> float:
        """Average precision at the final timepoint over patients labelled there."""
        if sample_weight is not None:
            raise ValueError("sample_weight is not supported")
        X = check_dataset(X, getattr(self, "catalog_", None))
        labels = X.labels[:, -1] if y is None else np.asarray(y)
        keep = labels != MISSING_LABEL
        probs = self.predict_proba(X.subset(keep))
        return one_vs_rest(average_precision, probs, labels[keep])
