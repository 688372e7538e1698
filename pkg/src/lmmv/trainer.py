"""Training loop, view dropout, evaluation helpers and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data.catalog import MISSING_LABEL, Dataset
from .data.io import decode_blob, encode_blob
from .metrics import MetricUndefined, evaluate_probs
from .model import Batch, ModelConfig, UnifiedModel, catalog_fingerprint
from .objective import AdamW, ScheduleConfig, class_weights, one_cycle_lr, weighted_masked_ce
from .tensor import NumericFault

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    view_dropout: float = 0.5
    lr: float = 1e-3
    group_lr: dict[str, float] = field(default_factory=lambda: {"T": 1e-4, "C": 1e-4})
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.3
    initial_div: float = 25.0
    final_div: float = 1e4
    selection_metric: str = "ap"
    noise_augment: float = 0.0
    contrast_augment: float = 0.0
    rotate_degrees: float = 0.0
    eval_batch_size: int = 256

    def __post_init__(self):
        if not 0.0 <= self.view_dropout < 1.0:
            raise ValueError(f"view_dropout={self.view_dropout} outside [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.selection_metric not in ("ap", "roc", "macro_acc"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")
        self.betas = tuple(self.betas)
        self.group_lr = dict(self.group_lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def apply_view_dropout(available: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Independently hide each available (patient, timepoint, view) slot with
    probability ``p``.  Missing slots stay missing."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    available = np.asarray(available, dtype=bool)
    if p == 0.0:
        return available.copy()
    return available & (rng.random(available.shape) >= p)


def restrict_views(available: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    out = np.zeros_like(available, dtype=bool)
    keep = list(keep)
    out[..., keep] = available[..., keep]
    return out


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"ULMVCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    header: dict
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.header["fingerprint"]

    def build_model(self) -> UnifiedModel:
        from .data.catalog import ViewCatalog

        catalog = ViewCatalog.from_dict(self.header["catalog"])
        model = UnifiedModel(catalog, self.header["class_count"], ModelConfig(**self.header["model"]))
        model.load_state_dict(self.params)
        return model

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.header == other.header and _same_arrays(self.params, other.params)
                and _same_arrays(self.exp_avg, other.exp_avg)
                and _same_arrays(self.exp_avg_sq, other.exp_avg_sq))


def _same_arrays(a: dict, b: dict) -> bool:
    return (list(a) == list(b)
            and all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Binary container: magic, version, JSON header, then named ULMV blobs."""
    path = Path(path)
    header = json.dumps(ckpt.header, sort_keys=True).encode()
    entries = [(name, arr) for name, arr in ckpt.params.items()]
    entries += [(f"adam.m/{k}", v) for k, v in ckpt.exp_avg.items()]
    entries += [(f"adam.v/{k}", v) for k, v in ckpt.exp_avg_sq.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            blob = encode_blob(arr)
            fh.write(struct.pack("<I", len(nb)) + nb + struct.pack("<Q", len(blob)) + blob)
    return path


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 12
    header = json.loads(buf[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params, m, v = OrderedDict(), {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode()
        off += nlen
        (blen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        arr = decode_blob(buf[off:off + blen], f"{path}:{name}")
        off += blen
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if off != len(buf):
        raise ValueError(f"{path}: trailing bytes after last entry")
    return Checkpoint(params, header, m, v)


# ---------------------------------------------------------------- evaluation

def predict_proba(model: UnifiedModel, ds: Dataset, available: np.ndarray | None = None,
                  window: tuple[int, int] | None = None, batch_size: int = 256) -> np.ndarray:
    """(patients, classes) probabilities at the final position of ``window``."""
    out = []
    with T.no_grad():
        for lo in range(0, ds.n_patients, batch_size):
            idx = np.arange(lo, min(lo + batch_size, ds.n_patients))
            avail = None if available is None else available[idx]
            logits = model(Batch.from_dataset(ds, idx, avail, window))
            out.append(T.softmax(logits[:, -1, :]).data.astype(np.float64))
    if not out:
        return np.zeros((0, model.class_count))
    return np.concatenate(out)


def evaluate(model: UnifiedModel, ds: Dataset, available: np.ndarray | None = None,
             window: tuple[int, int] | None = None, batch_size: int = 256) -> dict:
    """Metrics at the final position, over patients labelled there."""
    final = ds.timepoints - 1 if window is None else window[1]
    y = ds.labels[:, final]
    keep = y != MISSING_LABEL
    if not keep.any():
        raise MetricUndefined("no labels at the evaluation position")
    sub = ds.subset(keep)
    probs = predict_proba(model, sub, None if available is None else available[keep], window, batch_size)
    return evaluate_probs(probs, y[keep])


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint, history: list[dict]):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


def _augment(x: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.contrast_augment:
        factor = 1.0 + rng.uniform(-cfg.contrast_augment, cfg.contrast_augment, size=(x.shape[0], x.shape[1], 1, 1, 1))
        x = x * factor.astype(x.dtype)
    if cfg.rotate_degrees:
        from scipy.ndimage import rotate

        angles = rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees, size=x.shape[:2])
        x = np.stack([[rotate(x[i, t], angles[i, t], axes=(1, 2), reshape=False, order=1)
                       for t in range(x.shape[1])] for i in range(x.shape[0])]).astype(x.dtype)
    if cfg.noise_augment:
        x = x + rng.normal(0.0, cfg.noise_augment, size=x.shape).astype(x.dtype)
    return x


class Trainer:
    """Owns a model, its optimizer and the random streams of one training run."""

    def __init__(self, train_ds: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 val_ds: Dataset | None = None, views: Sequence[str] | None = None):
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.cfg = cfg
        self.model_cfg = model_cfg or ModelConfig()
        catalog = train_ds.catalog
        self.views = None if views is None else [catalog.index(v) for v in views]
        if self.views is not None and not self.views:
            raise ValueError("view subset must be nonempty")
        init_ss, shuffle_ss, drop_ss, aug_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.model = UnifiedModel(catalog, train_ds.class_count, self.model_cfg,
                                  seed=int(init_ss.generate_state(1)[0]))
        self.shuffle_rng = np.random.default_rng(shuffle_ss)
        self.dropout_rng = np.random.default_rng(drop_ss)
        self.aug_rng = np.random.default_rng(aug_ss)
        self.optimizer = AdamW(self.model.parameters(), cfg.betas, cfg.eps, cfg.weight_decay)
        labelled = train_ds.labels[train_ds.labels != MISSING_LABEL]
        self.weights = class_weights(labelled, train_ds.class_count)
        self.steps_per_epoch = max(1, -(-train_ds.n_patients // cfg.batch_size))
        self.total_steps = max(1, cfg.epochs * self.steps_per_epoch)
        groups = self.model.param_groups()
        self.param_lr = {name: cfg.group_lr.get(g, cfg.lr) for name, g in groups.items()}
        self.schedules = {lr: ScheduleConfig(lr, self.total_steps, cfg.warmup_frac, cfg.initial_div,
                                             cfg.final_div) for lr in set(self.param_lr.values())}
        self.step_count = 0
        self.epoch = 0
        self.history: list[dict] = []
        self.best: Checkpoint | None = None
        self.best_score = -np.inf

    # -- masks

    def visible(self, available: np.ndarray) -> np.ndarray:
        return available if self.views is None else restrict_views(available, self.views)

    def learning_rates(self) -> dict[str, float]:
        rates = {lr: one_cycle_lr(self.step_count, sc) for lr, sc in self.schedules.items()}
        return {name: rates[lr] for name, lr in self.param_lr.items()}

    def train_step(self, idx: np.ndarray) -> float:
        ds = self.train_ds
        avail = self.visible(ds.available[idx])
        if self.cfg.view_dropout:
            avail = apply_view_dropout(avail, self.cfg.view_dropout, self.dropout_rng)
        obs = [o[idx] for o in ds.obs]
        if self.cfg.noise_augment or self.cfg.contrast_augment or self.cfg.rotate_degrees:
            obs = [_augment(o, self.cfg, self.aug_rng) if v.kind == "image" else o
                   for o, v in zip(obs, ds.catalog.views)]
        self.optimizer.zero_grad()
        logits = self.model(Batch(obs, avail))
        loss = weighted_masked_ce(logits, ds.labels[idx], self.weights)
        loss.backward()
        self.optimizer.step(self.learning_rates())
        self.step_count += 1
        return float(loss.data)

    def validate(self) -> dict:
        if self.val_ds is None:
            return {}
        avail = self.visible(self.val_ds.available)
        try:
            return evaluate(self.model, self.val_ds, avail, batch_size=self.cfg.eval_batch_size)
        except MetricUndefined as exc:
            log.warning("validation metrics undefined: %s", exc)
            return {}

    def run_epoch(self) -> dict:
        order = self.shuffle_rng.permutation(self.train_ds.n_patients)
        losses = []
        for lo in range(0, order.size, self.cfg.batch_size):
            losses.append(self.train_step(np.sort(order[lo:lo + self.cfg.batch_size])))
        self.epoch += 1
        row = {"epoch": self.epoch, "train_loss": float(np.mean(losses)),
               "lr": float(one_cycle_lr(self.step_count, ScheduleConfig(
                   self.cfg.lr, self.total_steps, self.cfg.warmup_frac,
                   self.cfg.initial_div, self.cfg.final_div)))}
        val = self.validate()
        for k in ("ap", "roc", "macro_acc"):
            row[f"val_{k}"] = val.get(k)
        self.history.append(row)
        return row

    def state(self, metrics: dict | None = None) -> Checkpoint:
        ds = self.train_ds
        header = {
            "fingerprint": self.model.fingerprint(),
            "dataset_fingerprint": catalog_fingerprint(ds.catalog, ds.class_count),
            "catalog": ds.catalog.to_dict(),
            "class_count": ds.class_count,
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "views": None if self.views is None else [ds.catalog.names[a] for a in self.views],
            "epoch": self.epoch,
            "step": self.step_count,
            "optimizer_step": self.optimizer.state.step,
            "total_steps": self.total_steps,
            "rng": {"shuffle": self.shuffle_rng.bit_generator.state,
                    "dropout": self.dropout_rng.bit_generator.state,
                    "augment": self.aug_rng.bit_generator.state},
            "metrics": metrics or {},
        }
        st = self.optimizer.state
        return Checkpoint(self.model.state_dict(), header,
                          {k: v.copy() for k, v in st.exp_avg.items()},
                          {k: v.copy() for k, v in st.exp_avg_sq.items()})

    def restore(self, ckpt: Checkpoint) -> None:
        h = ckpt.header
        if h["fingerprint"] != self.model.fingerprint():
            raise ValueError("checkpoint fingerprint does not match this model configuration")
        self.model.load_state_dict(ckpt.params)
        st = self.optimizer.state
        st.exp_avg = {k: v.copy() for k, v in ckpt.exp_avg.items()}
        st.exp_avg_sq = {k: v.copy() for k, v in ckpt.exp_avg_sq.items()}
        st.step = h["optimizer_step"]
        self.step_count = h["step"]
        self.epoch = h["epoch"]
        self.shuffle_rng.bit_generator.state = h["rng"]["shuffle"]
        self.dropout_rng.bit_generator.state = h["rng"]["dropout"]
        self.aug_rng.bit_generator.state = h["rng"]["augment"]

    def fit(self) -> tuple[Checkpoint, list[dict]]:
        """Run every epoch; return the best-on-validation checkpoint and the log."""
        key = f"val_{self.cfg.selection_metric}"
        self.best = self.state({"selected_epoch": 0})
        for _ in range(self.cfg.epochs):
            last_good = self.state()
            try:
                row = self.run_epoch()
            except NumericFault as exc:
                raise TrainingDiverged(f"epoch {self.epoch + 1}: {exc}", last_good, self.history) from exc
            log.info("epoch %d loss %.4f %s %s", row["epoch"], row["train_loss"], key, row[key])
            score = row[key] if row[key] is not None else -row["train_loss"]
            if score > self.best_score:
                self.best_score = score
                self.best = self.state({"selected_epoch": row["epoch"], key: row[key]})
        return self.best, self.history


def train(train_ds: Dataset, val_ds: Dataset | None, cfg: TrainConfig,
          model_cfg: ModelConfig | None = None) -> tuple[Checkpoint, list[dict]]:
    return Trainer(train_ds, cfg, model_cfg, val_ds).fit()


def train_view_specific(train_ds: Dataset, val_ds: Dataset | None, views: Sequence[str],
                        cfg: TrainConfig, model_cfg: ModelConfig | None = None
                        ) -> tuple[Checkpoint, list[dict]]:
    """Train on a fixed view subset with view dropout disabled."""
    if not views:
        raise ValueError("view subset must be nonempty")
    cfg = TrainConfig(**{**cfg.to_dict(), "view_dropout": 0.0})
    return Trainer(train_ds, cfg, model_cfg, val_ds, views=views).fit()
