"""View catalog, dataset container and tabular missing-value conventions."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

MISSING_CONTINUOUS = -1.0
MISSING_CODE = 0  # reserved categorical code for "Missing"
MISSING_LABEL = -1


class SchemaError(ValueError):
    """A value or record does not conform to the declared schema."""

    def __init__(self, message: str, column: str | None = None):
        self.column = column
        super().__init__(f"column {column!r}: {message}" if column else message)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "continuous" | "categorical"
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"unknown column kind {self.kind!r}", self.name)
        if self.kind == "categorical" and not self.categories:
            raise SchemaError("categorical column needs categories", self.name)

    @property
    def cardinality(self) -> int:
        """Vocabulary size including the Missing code."""
        return len(self.categories) + 1

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Column":
        return cls(d["name"], d["kind"], tuple(d.get("categories", ())))


@dataclass(frozen=True)
class ViewSpec:
    """One view slot: an image or a tabular record, with its cohort schedule."""

    name: str
    kind: str  # "image" | "tabular"
    image_shape: tuple[int, int, int] | None = None
    schema: tuple[Column, ...] = ()
    feature_dim: int = 64
    schedule: tuple[int, ...] = ()
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in ("image", "tabular"):
            raise SchemaError(f"view {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "image" and (self.image_shape is None or len(self.image_shape) != 3):
            raise SchemaError(f"view {self.name!r}: image views need (channels, height, width)")
        if self.kind == "tabular" and not self.schema:
            raise SchemaError(f"view {self.name!r}: tabular views need a schema")
        if self.feature_dim <= 0:
            raise SchemaError(f"view {self.name!r}: feature_dim must be positive")

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return tuple(self.image_shape) if self.kind == "image" else (len(self.schema),)

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "feature_dim": self.feature_dim,
             "schedule": list(self.schedule), "normalize": self.normalize}
        if self.kind == "image":
            d["image_shape"] = list(self.image_shape)
        else:
            d["schema"] = [c.to_dict() for c in self.schema]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViewSpec":
        return cls(
            name=d["name"], kind=d["kind"],
            image_shape=tuple(d["image_shape"]) if d.get("image_shape") else None,
            schema=tuple(Column.from_dict(c) for c in d.get("schema", ())),
            feature_dim=int(d.get("feature_dim", 64)),
            schedule=tuple(int(t) for t in d.get("schedule", ())),
            normalize=bool(d.get("normalize", False)),
        )


@dataclass(frozen=True)
class ViewCatalog:
    views: tuple[ViewSpec, ...]
    timepoints: int

    def __post_init__(self):
        if not self.views:
            raise SchemaError("catalog needs at least one view")
        names = [v.name for v in self.views]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate view names in {names}")
        for v in self.views:
            if any(t < 0 or t >= self.timepoints for t in v.schedule):
                raise SchemaError(f"view {v.name!r}: schedule {v.schedule} outside 0..{self.timepoints - 1}")

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.views]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown view {name!r}; catalog has {self.names}") from None

    def schedule_mask(self) -> np.ndarray:
        """(timepoints, n_views) boolean cohort-level availability."""
        m = np.zeros((self.timepoints, self.n_views), dtype=bool)
        for a, v in enumerate(self.views):
            m[list(v.schedule), a] = True
        return m

    def to_dict(self) -> dict:
        return {"timepoints": self.timepoints, "views": [v.to_dict() for v in self.views]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViewCatalog":
        return cls(tuple(ViewSpec.from_dict(v) for v in d["views"]), int(d["timepoints"]))


@dataclass
class PatientSeries:
    patient_id: str
    observations: list[list[np.ndarray | None]]  # [timepoint][view]
    available: np.ndarray  # (timepoints, n_views) bool
    labels: list[int | None]


@dataclass
class Dataset:
    """Column-oriented longitudinal dataset.

    ``obs[a]`` holds view ``a`` for every (patient, timepoint) as a dense
    float32 array of shape (patients, timepoints, *obs_shape); entries where
    ``available[..., a]`` is False are zero and carry no meaning.
    """

    catalog: ViewCatalog
    class_count: int
    obs: list[np.ndarray]
    available: np.ndarray
    labels: np.ndarray
    patient_ids: list[str]
    split: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p, t = self.labels.shape
        if self.available.shape != (p, t, self.catalog.n_views):
            raise SchemaError(f"availability shape {self.available.shape} != {(p, t, self.catalog.n_views)}")
        if t != self.catalog.timepoints:
            raise SchemaError(f"label grid has {t} timepoints, catalog declares {self.catalog.timepoints}")
        for a, v in enumerate(self.catalog.views):
            if self.obs[a].shape != (p, t) + v.obs_shape:
                raise SchemaError(f"view {v.name!r}: observation array {self.obs[a].shape} "
                                  f"!= {(p, t) + v.obs_shape}")
        if len(self.patient_ids) != p or len(self.split) != p:
            raise SchemaError("patient ids / split length mismatch")

    @property
    def n_patients(self) -> int:
        return self.labels.shape[0]

    @property
    def timepoints(self) -> int:
        return self.labels.shape[1]

    def __len__(self) -> int:
        return self.n_patients

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(
            catalog=self.catalog, class_count=self.class_count,
            obs=[o[idx] for o in self.obs], available=self.available[idx],
            labels=self.labels[idx], patient_ids=[self.patient_ids[i] for i in idx],
            split=self.split[idx], meta=self.meta,
        )

    def part(self, name: str) -> "Dataset":
        return self.subset(self.split == name)

    def patient(self, i: int) -> PatientSeries:
        obs = [[self.obs[a][i, t] if self.available[i, t, a] else None
                for a in range(self.catalog.n_views)] for t in range(self.timepoints)]
        labels = [int(y) if y != MISSING_LABEL else None for y in self.labels[i]]
        return PatientSeries(self.patient_ids[i], obs, self.available[i].copy(), labels)

    def with_availability(self, available: np.ndarray) -> "Dataset":
        """Same data with a narrower availability pattern (content untouched)."""
        if available.shape != self.available.shape:
            raise SchemaError("availability shape mismatch")
        return Dataset(self.catalog, self.class_count, self.obs, available & self.available,
                       self.labels, self.patient_ids, self.split, self.meta)

    def validate(self) -> None:
        """Check schedule enforcement and label range."""
        sched = self.catalog.schedule_mask()
        if (self.available & ~sched[None]).any():
            raise SchemaError("observation present outside its view's cohort schedule")
        lab = self.labels[self.labels != MISSING_LABEL]
        if lab.size and (lab.min() < 0 or lab.max() >= self.class_count):
            raise SchemaError(f"labels outside 0..{self.class_count - 1}")


def encode_missing_tabular(row: Mapping[str, object], schema: Sequence[Column]) -> np.ndarray:
    """Encode a raw record: continuous gaps become -1, categorical gaps the
    Missing code 0, categories their 1-based position in the schema."""
    out = np.empty(len(schema), dtype=np.float32)
    unknown = set(row) - {c.name for c in schema}
    if unknown:
        raise SchemaError(f"record has columns outside the schema: {sorted(unknown)}")
    for j, col in enumerate(schema):
        val = row.get(col.name)
        gap = val is None or (isinstance(val, float) and np.isnan(val))
        if col.kind == "continuous":
            if gap:
                out[j] = MISSING_CONTINUOUS
            else:
                try:
                    out[j] = float(val)
                except (TypeError, ValueError):
                    raise SchemaError(f"non-numeric value {val!r}", col.name) from None
        else:
            if gap or val == "Missing":
                out[j] = MISSING_CODE
            elif val in col.categories:
                out[j] = col.categories.index(val) + 1
            else:
                raise SchemaError(f"value {val!r} not in {list(col.categories)}", col.name)
    return out
