"""Fuse one timepoint's view features into a single summary vector.

The token sequence is ``[SUM]`` followed by one slot per view.  Available
views carry their (projected) feature, unavailable ones the learnable
``[PAD]`` embedding; every slot also gets its view embedding.  Attention keys
at unavailable slots are masked, so the ``[SUM]`` output never depends on
their content.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data.catalog import ViewSpec
from .nn import Linear, Module, ModuleList, TransformerBlock, embedding_param
from .tensor import Tensor


@dataclass
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    penalty: float = T.DEFAULT_PENALTY

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.penalty > -1e8:
            raise ValueError(f"mask penalty {self.penalty} must be <= -1e8")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


class MaskError(ValueError):
    """Features and availability mask disagree."""


class Identity(Module):
    def forward(self, x):
        return x


class Summarizer(Module):
    def __init__(self, views: Sequence[ViewSpec], cfg: AttentionConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.n_views = len(views)
        self.sum_embedding = embedding_param(rng, (d,))
        self.pad_embedding = embedding_param(rng, (d,))
        self.view_embeddings = embedding_param(rng, (self.n_views + 1, d))
        # tabular features always go through a projection; images only when widths differ
        self.projections = ModuleList(
            Linear(v.feature_dim, d, rng) if (v.kind == "tabular" or v.feature_dim != d) else Identity()
            for v in views
        )
        self.blocks = ModuleList(TransformerBlock(d, cfg.heads, rng, cfg.penalty) for _ in range(cfg.layers))

    def assemble_batch(self, view_rows: Sequence[tuple[Tensor | None, np.ndarray]],
                       mask: np.ndarray) -> Tensor:
        """Build (N, n+1, d) tokens.

        ``view_rows[a]`` is ``(features, rows)``: encoder features for the
        token rows where view ``a`` is available, and those row indices.
        ``mask`` is (N, n+1) with column 0 (the [SUM] slot) all ones.
        """
        mask = np.asarray(mask)
        n_tok, width = mask.shape
        if width != self.n_views + 1:
            raise MaskError(f"mask has {width} slots, expected {self.n_views + 1}")
        if not (mask[:, 0] == 1).all():
            raise MaskError("[SUM] slot must always be available")
        dtype = self.sum_embedding.dtype
        ve = self.view_embeddings
        zeros = T.Tensor(np.zeros((n_tok, 1, self.cfg.d_model), dtype=dtype))
        slots = [zeros + T.reshape(self.sum_embedding + ve[0], (1, 1, -1))]
        for a, (feats, rows) in enumerate(view_rows):
            avail = mask[:, a + 1].astype(bool)
            rows = np.asarray(rows, dtype=np.int64)
            if not np.array_equal(np.flatnonzero(avail), np.sort(rows)):
                raise MaskError(f"view slot {a + 1}: features supplied for rows {rows.tolist()[:8]} "
                                f"but mask marks {np.flatnonzero(avail).tolist()[:8]} available")
            pad = T.Tensor((1.0 - avail.astype(dtype))[:, None], dtype=dtype) * self.pad_embedding
            if rows.size:
                slot = T.scatter_rows(self.projections[a](feats), rows, n_tok) + pad
            else:
                slot = pad
            slots.append(T.reshape(slot + ve[a + 1], (n_tok, 1, -1)))
        return T.concat(slots, axis=1)

    def assemble_tokens(self, features: Sequence[Tensor | np.ndarray | None], mask) -> Tensor:
        """Single-timepoint form: ``features[a]`` is a vector or None."""
        mask = np.asarray(mask)
        if mask.shape != (self.n_views + 1,):
            raise MaskError(f"mask shape {mask.shape} != {(self.n_views + 1,)}")
        if len(features) != self.n_views:
            raise MaskError(f"got {len(features)} feature slots for {self.n_views} views")
        rows = []
        for a, f in enumerate(features):
            if (f is None) == bool(mask[a + 1]):
                state = "missing for an available" if f is None else "supplied for a masked"
                raise MaskError(f"feature {state} slot {a + 1}")
            if f is None:
                rows.append((None, np.zeros(0, dtype=np.int64)))
            else:
                f = T.as_tensor(f, dtype=self.sum_embedding.dtype)
                rows.append((T.reshape(f, (1, -1)), np.zeros(1, dtype=np.int64)))
        tokens = self.assemble_batch(rows, mask[None])
        return T.reshape(tokens, tokens.shape[1:])

    def summarize(self, tokens: Tensor, mask: np.ndarray | None) -> Tensor:
        """Run the masked attention stack and return the [SUM] output row.

        ``mask=None`` disables masking entirely.
        """
        single = tokens.ndim == 2
        if single:
            tokens = T.reshape(tokens, (1,) + tokens.shape)
            mask = None if mask is None else np.asarray(mask)[None]
        key_mask = None
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != tokens.shape[:2]:
                raise MaskError(f"mask shape {mask.shape} != token grid {tokens.shape[:2]}")
            if not (mask[:, 0] == 1).all():
                raise MaskError("[SUM] slot must always be available")
            key_mask = mask[:, None, None, :]
        h = tokens
        for block in self.blocks:
            h = block(h, key_mask)
        out = h[:, 0, :]
        return T.reshape(out, out.shape[1:]) if single else out
