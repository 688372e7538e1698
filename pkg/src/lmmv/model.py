"""The unified model: per-view encoders -> masked summarizer -> causal decoder."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data.catalog import Dataset, ViewCatalog
from .decoder import TemporalDecoder
from .encoders import build_encoder
from .nn import Module, ModuleList, name_parameters
from .summarizer import AttentionConfig, Summarizer
from .tensor import Tensor


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    summarizer_layers: int = 2
    decoder_layers: int = 2
    image_widths: tuple[int, ...] = (8, 16, 32)
    tabular_dim: int = 32
    tabular_layers: int = 2
    tabular_heads: int = 4
    penalty: float = T.DEFAULT_PENALTY

    def __post_init__(self):
        self.image_widths = tuple(self.image_widths)

    def summarizer_cfg(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.summarizer_layers, self.penalty)

    def decoder_cfg(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.decoder_layers, self.penalty)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_widths"] = list(self.image_widths)
        return d


@dataclass
class Batch:
    """Model input for B patients over L timepoints.

    ``obs[a]`` is (B, L, *obs_shape); ``available`` (B, L, n) is the mask the
    model sees (after any view dropout or subset restriction); ``positions``
    are absolute timepoint indices of the L columns.
    """

    obs: list[np.ndarray]
    available: np.ndarray
    positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.positions is None:
            self.positions = np.arange(self.available.shape[1])

    @classmethod
    def from_dataset(cls, ds: Dataset, idx=None, available: np.ndarray | None = None,
                     window: tuple[int, int] | None = None) -> "Batch":
        idx = np.arange(ds.n_patients) if idx is None else np.asarray(idx)
        lo, hi = (0, ds.timepoints - 1) if window is None else window
        sl = slice(lo, hi + 1)
        avail = ds.available[idx] if available is None else available
        return cls([o[idx][:, sl] for o in ds.obs], avail[:, sl], np.arange(lo, hi + 1))


def fingerprint(catalog: ViewCatalog, class_count: int, cfg: ModelConfig) -> str:
    blob = json.dumps({"catalog": catalog.to_dict(), "class_count": class_count,
                       "model": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def catalog_fingerprint(catalog: ViewCatalog, class_count: int) -> str:
    blob = json.dumps({"catalog": catalog.to_dict(), "class_count": class_count}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class UnifiedModel(Module):
    def __init__(self, catalog: ViewCatalog, class_count: int, cfg: ModelConfig | None = None,
                 seed: int = 0, zero_head: bool = False):
        cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.catalog = catalog
        self.class_count = class_count
        self.cfg = cfg
        self.encoders = ModuleList(
            build_encoder(v, rng, widths=cfg.image_widths, token_dim=cfg.tabular_dim,
                          layers=cfg.tabular_layers, heads=cfg.tabular_heads)
            for v in catalog.views
        )
        self.summarizer = Summarizer(catalog.views, cfg.summarizer_cfg(), rng)
        self.decoder = TemporalDecoder(cfg.decoder_cfg(), catalog.timepoints, class_count, rng,
                                       zero_head=zero_head)
        name_parameters(self)

    @property
    def dtype(self):
        return self.summarizer.sum_embedding.dtype

    def fingerprint(self) -> str:
        return fingerprint(self.catalog, self.class_count, self.cfg)

    def token_mask(self, available: np.ndarray) -> np.ndarray:
        n_tok = available.shape[0] * available.shape[1]
        mask = np.ones((n_tok, self.catalog.n_views + 1), dtype=np.int8)
        mask[:, 1:] = available.reshape(n_tok, -1)
        return mask

    def summaries(self, batch: Batch) -> Tensor:
        """(B, L, d) per-timepoint summary features."""
        b, length, n = batch.available.shape
        if n != self.catalog.n_views:
            raise T.ShapeError("forward", [batch.available.shape], f"catalog has {self.catalog.n_views} views")
        mask = self.token_mask(batch.available)
        n_tok = b * length
        view_rows = []
        for a, enc in enumerate(self.encoders):
            rows = np.flatnonzero(mask[:, a + 1])
            if rows.size:
                x = batch.obs[a].reshape((n_tok,) + batch.obs[a].shape[2:])[rows]
                view_rows.append((enc(T.Tensor(x, dtype=self.dtype)), rows))
            else:
                view_rows.append((None, rows))
        tokens = self.summarizer.assemble_batch(view_rows, mask)
        summ = self.summarizer.summarize(tokens, mask)
        return T.reshape(summ, (b, length, -1))

    def forward(self, batch: Batch) -> Tensor:
        """(B, L, classes) logits at every input timepoint."""
        return self.decoder(self.summaries(batch), batch.positions)

    def param_groups(self) -> dict[str, str]:
        """Parameter name -> group label (encoder view name, or "default")."""
        groups = {}
        for name, _ in self.named_parameters():
            if name.startswith("encoders."):
                groups[name] = self.catalog.views[int(name.split(".")[1])].name
            else:
                groups[name] = "default"
        return groups
