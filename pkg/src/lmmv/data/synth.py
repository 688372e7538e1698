"""Synthetic longitudinal multi-view cohorts with controllable missingness.

Each patient follows a latent trajectory ``z_t = z_0 + t * drift + noise``.
The label attached to timepoint ``t`` is read off ``z_{t+1}``, so every
position predicts one horizon ahead and the patient's drift (recoverable
only from several visits) is useful.  Views expose noisy linear readouts of
``z_t``: tabular views as columns, image views as Gaussian blobs whose
amplitudes follow the readouts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .catalog import (MISSING_CODE, MISSING_CONTINUOUS, MISSING_LABEL, Column, Dataset,
                      ViewCatalog, ViewSpec)
from .preprocess import percentile_normalize

CATEGORY_NAMES = ("low", "mid", "high")


@dataclass
class ViewSynth:
    name: str
    kind: str
    schedule: tuple[int, ...] | None = None  # None: every timepoint
    missing_prob: float = 0.2
    signal: float = 1.0
    noise: float = 0.5
    n_continuous: int = 6
    n_categorical: int = 2
    image_size: int = 32
    blobs: int = 4
    normalize: bool = False


def default_views(timepoints: int = 4) -> list[ViewSynth]:
    # the thickness-map analogue skips visit 1, mimicking a cohort-wide gap
    c_sched = tuple(t for t in range(timepoints) if t != 1) if timepoints >= 3 else None
    return [
        ViewSynth("T", "tabular"),
        ViewSynth("C", "image", schedule=c_sched),
        ViewSynth("K", "image", normalize=True),
    ]


@dataclass
class SynthConfig:
    n_patients: int = 2000
    timepoints: int = 4
    class_count: int = 2
    views: list[ViewSynth] | None = None
    label_missing_prob: float = 0.1
    attribute_missing_prob: float = 0.05
    latent_dim: int = 4
    drift: float = 0.5
    noise: float = 0.3
    prevalence: float = 0.3
    split: tuple[float, float] = (0.5, 0.125)
    seed: int = 0

    def __post_init__(self):
        if self.views is None:
            self.views = default_views(self.timepoints)
        self.views = [v if isinstance(v, ViewSynth) else ViewSynth(**v) for v in self.views]
        for v in self.views:
            if v.schedule is not None:
                v.schedule = tuple(v.schedule)
        self.split = tuple(self.split)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        for v in d["views"]:
            if v["schedule"] is not None:
                v["schedule"] = list(v["schedule"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("views") is not None:
            d["views"] = [ViewSynth(**v) for v in d["views"]]
        return cls(**d)


def _check(cfg: SynthConfig) -> None:
    probs = {"label_missing_prob": cfg.label_missing_prob,
             "attribute_missing_prob": cfg.attribute_missing_prob}
    probs.update({f"views[{v.name}].missing_prob": v.missing_prob for v in cfg.views})
    for k, p in probs.items():
        if not 0.0 <= p < 1.0:
            raise ValueError(f"{k}={p} outside [0, 1)")
    if cfg.n_patients < 1 or cfg.timepoints < 1 or cfg.class_count < 2:
        raise ValueError("need n_patients >= 1, timepoints >= 1, class_count >= 2")
    if not cfg.views:
        raise ValueError("need at least one view")
    if not 0.0 < cfg.prevalence < 1.0:
        raise ValueError(f"prevalence={cfg.prevalence} outside (0, 1)")
    if not any(v.schedule is None or len(v.schedule) for v in cfg.views):
        raise ValueError("every view is absent at every timepoint")
    if sum(cfg.split) > 1.0:
        raise ValueError(f"split fractions {cfg.split} exceed 1")


def _blob_bank(rng: np.random.Generator, k: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centers = rng.uniform(0.2 * size, 0.8 * size, size=(k, 2))
    sigma = size / 10.0
    g = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2
                 + (xx[None] - centers[:, 1, None, None]) ** 2) / (2 * sigma ** 2))
    return g.reshape(k, size * size)


def generate(cfg: SynthConfig) -> Dataset:
    _check(cfg)
    rng = np.random.default_rng(cfg.seed)
    P, L, D = cfg.n_patients, cfg.timepoints, cfg.latent_dim

    z0 = rng.normal(size=(P, D))
    drift = rng.normal(scale=cfg.drift, size=(P, D))
    eps = rng.normal(scale=cfg.noise, size=(P, L + 1, D))
    z = z0[:, None] + np.arange(L + 1)[None, :, None] * drift[:, None] + eps

    w = rng.normal(size=D)
    w /= np.linalg.norm(w)
    target = z[:, 1:] @ w  # horizon-ahead score for each input timepoint
    if cfg.class_count == 2:
        labels = (target > np.quantile(target, 1.0 - cfg.prevalence)).astype(np.int64)
    else:
        cuts = np.quantile(target, np.arange(1, cfg.class_count) / cfg.class_count)
        labels = np.digitize(target, cuts).astype(np.int64)
    drop = rng.random((P, L)) < cfg.label_missing_prob
    empty = drop.all(axis=1)
    if empty.any():
        keep_t = rng.integers(0, L, size=int(empty.sum()))
        drop[np.flatnonzero(empty), keep_t] = False
    labels[drop] = MISSING_LABEL

    specs, obs, avail = [], [], []
    for v in cfg.views:
        sched = tuple(range(L)) if v.schedule is None else tuple(sorted(v.schedule))
        if any(t < 0 or t >= L for t in sched):
            raise ValueError(f"view {v.name!r}: schedule {sched} outside 0..{L - 1}")
        if v.kind == "tabular":
            width = v.n_continuous + v.n_categorical
        elif v.kind == "image":
            width = v.blobs
        else:
            raise ValueError(f"view {v.name!r}: unknown kind {v.kind!r}")
        readout = rng.normal(size=(D, width)) / np.sqrt(D)
        r = v.signal * (z[:, :L] @ readout) + rng.normal(scale=v.noise, size=(P, L, width))

        if v.kind == "tabular":
            cont = r[..., : v.n_continuous]
            cat = np.digitize(r[..., v.n_continuous:], (-0.5, 0.5)) + 1
            x = np.concatenate([cont, cat], axis=-1)
            gaps = rng.random(x.shape) < cfg.attribute_missing_prob
            fill = np.where(np.arange(width) < v.n_continuous, MISSING_CONTINUOUS, MISSING_CODE)
            x = np.where(gaps, np.broadcast_to(fill, x.shape), x).astype(np.float32)
            schema = tuple([Column(f"{v.name}_x{j}", "continuous") for j in range(v.n_continuous)]
                           + [Column(f"{v.name}_c{j}", "categorical", CATEGORY_NAMES)
                              for j in range(v.n_categorical)])
            spec = ViewSpec(v.name, "tabular", schema=schema, schedule=sched)
        else:
            bank = _blob_bank(rng, v.blobs, v.image_size)
            img = 1.0 + r @ bank + rng.normal(scale=0.3, size=(P, L, v.image_size ** 2))
            img = img.reshape(P, L, 1, v.image_size, v.image_size)
            if v.normalize:
                img = np.stack([[percentile_normalize(img[i, t]) for t in range(L)] for i in range(P)])
            x = img.astype(np.float32)
            spec = ViewSpec(v.name, "image", image_shape=(1, v.image_size, v.image_size),
                            schedule=sched, normalize=v.normalize)

        present = np.zeros((P, L), dtype=bool)
        present[:, list(sched)] = True
        present &= rng.random((P, L)) >= v.missing_prob
        x[~present] = 0.0
        specs.append(spec)
        obs.append(x)
        avail.append(present)

    perm = rng.permutation(P)
    n_train = int(round(cfg.split[0] * P))
    n_val = int(round(cfg.split[1] * P))
    split = np.empty(P, dtype="<U5")
    split[perm[:n_train]] = "train"
    split[perm[n_train:n_train + n_val]] = "val"
    split[perm[n_train + n_val:]] = "test"

    ds = Dataset(
        catalog=ViewCatalog(tuple(specs), L), class_count=cfg.class_count, obs=obs,
        available=np.stack(avail, axis=-1), labels=labels,
        patient_ids=[f"P{i:05d}" for i in range(P)], split=split,
        meta={"synth": cfg.to_dict()},
    )
    ds.validate()
    return ds


def missingness_summary(ds: Dataset) -> dict:
    sched = ds.catalog.schedule_mask()
    out = {"patients": ds.n_patients, "timepoints": ds.timepoints,
           "label_missing_rate": float((ds.labels == MISSING_LABEL).mean()), "views": {}}
    for a, name in enumerate(ds.catalog.names):
        slots = sched[:, a].sum() * ds.n_patients
        present = ds.available[..., a].sum()
        out["views"][name] = {
            "scheduled_slots": int(slots),
            "present": int(present),
            "missing_rate": float(1.0 - present / slots) if slots else None,
        }
    out["splits"] = {s: int((ds.split == s).sum()) for s in ("train", "val", "test")}
    return out

