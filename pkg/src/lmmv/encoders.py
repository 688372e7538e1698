"""Per-view feature extractors: a small residual CNN for images and a
column-attention transformer for tabular records.  One encoder per view,
shared across timepoints."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .data.catalog import SchemaError, ViewSpec
from .nn import Conv2d, LayerNorm, Linear, Module, ModuleList, TransformerBlock, embedding_param
from .tensor import ShapeError, Tensor


class ResidualStage(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.conv_a = Conv2d(width, width, 3, rng)
        self.conv_b = Conv2d(width, width, 3, rng)

    def forward(self, h: Tensor) -> Tensor:
        return T.gelu(h + self.conv_b(T.gelu(self.conv_a(h))))


class ImageEncoder(Module):
    """stem conv -> residual stages (stride-2 conv between stages) -> global
    average pool -> linear to ``feature_dim``.

    Takes (N, C, H, W) images and works channels-last internally.
    """

    def __init__(self, spec: ViewSpec, rng: np.random.Generator,
                 widths: tuple[int, ...] = (8, 16, 32), zero_head: bool = False):
        if spec.kind != "image":
            raise SchemaError(f"view {spec.name!r} is not an image view")
        self.spec = spec
        channels = spec.image_shape[0]
        self.stem = Conv2d(channels, widths[0], 3, rng)
        self.stages = ModuleList(ResidualStage(w, rng) for w in widths)
        self.downs = ModuleList(Conv2d(w_in, w_out, 3, rng, stride=2)
                                for w_in, w_out in zip(widths[:-1], widths[1:]))
        self.head = Linear(widths[-1], spec.feature_dim, rng)
        if zero_head:
            self.head.weight.data[:] = 0.0

    def forward(self, images) -> Tensor:
        x = T.as_tensor(images, dtype=self.head.weight.dtype)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.image_shape):
            raise ShapeError("encode_image", [x.shape, (None,) + tuple(self.spec.image_shape)],
                             f"view {self.spec.name!r}")
        h = T.gelu(self.stem(T.transpose(x, (0, 2, 3, 1))))
        for i, stage in enumerate(self.stages):
            if i:
                h = T.gelu(self.downs[i - 1](h))
            h = stage(h)
        return self.head(T.mean(h, axis=(1, 2)))


class TabularEncoder(Module):
    """Column tokens (lookup tables for categoricals, value * vector + bias for
    continuous columns) -> self-attention over columns -> mean pool -> linear."""

    def __init__(self, spec: ViewSpec, rng: np.random.Generator, token_dim: int = 32,
                 layers: int = 2, heads: int = 4):
        if spec.kind != "tabular":
            raise SchemaError(f"view {spec.name!r} is not a tabular view")
        self.spec = spec
        self.cat_idx = np.array([j for j, c in enumerate(spec.schema) if c.kind == "categorical"], dtype=int)
        self.cont_idx = np.array([j for j, c in enumerate(spec.schema) if c.kind == "continuous"], dtype=int)
        cards = np.array([spec.schema[j].cardinality for j in self.cat_idx], dtype=int)
        self.cards = cards
        self.offsets = np.concatenate([[0], np.cumsum(cards)[:-1]]).astype(np.int64) if cards.size else cards
        if cards.size:
            self.cat_table = embedding_param(rng, (int(cards.sum()), token_dim))
        if self.cont_idx.size:
            self.cont_weight = embedding_param(rng, (self.cont_idx.size, token_dim))
            self.cont_bias = embedding_param(rng, (self.cont_idx.size, token_dim))
        self.blocks = ModuleList(TransformerBlock(token_dim, heads, rng) for _ in range(layers))
        self.ln_f = LayerNorm(token_dim)
        self.head = Linear(token_dim, spec.feature_dim, rng)

    def check_codes(self, rows: np.ndarray) -> None:
        for k, j in enumerate(self.cat_idx):
            col = rows[:, j]
            bad = (col != np.round(col)) | (col < 0) | (col >= self.cards[k])
            if bad.any():
                raise SchemaError(f"unknown categorical code {col[bad][0]!r}", self.spec.schema[j].name)

    def forward(self, rows) -> Tensor:
        x = np.asarray(rows.data if isinstance(rows, Tensor) else rows)
        if x.ndim != 2 or x.shape[1] != len(self.spec.schema):
            raise ShapeError("encode_tabular", [x.shape, (None, len(self.spec.schema))],
                             f"view {self.spec.name!r}")
        self.check_codes(x)
        parts = []
        if self.cat_idx.size:
            codes = x[:, self.cat_idx].astype(np.int64) + self.offsets
            parts.append(T.embedding(self.cat_table, codes))
        if self.cont_idx.size:
            vals = T.Tensor(x[:, self.cont_idx, None], dtype=self.cont_weight.dtype)
            parts.append(vals * self.cont_weight + self.cont_bias)
        h = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        for block in self.blocks:
            h = block(h, None)
        return self.head(T.mean(self.ln_f(h), axis=1))


def build_encoder(spec: ViewSpec, rng: np.random.Generator, **kwargs) -> Module:
    if spec.kind == "image":
        return ImageEncoder(spec, rng, **{k: v for k, v in kwargs.items() if k in ("widths", "zero_head")})
    return TabularEncoder(spec, rng, **{k: v for k, v in kwargs.items()
                                         if k in ("token_dim", "layers", "heads")})


def encode_image(encoder: ImageEncoder, image) -> Tensor:
    """Encode one (C, H, W) image or a (N, C, H, W) batch."""
    x = T.as_tensor(image, dtype=encoder.head.weight.dtype)
    single = x.ndim == 3
    out = encoder(x.reshape((1,) + x.shape) if single else x)
    return out.reshape(out.shape[1:]) if single else out


def encode_tabular(encoder: TabularEncoder, row) -> Tensor:
    """Encode one encoded record (1-D) or a batch of records (2-D)."""
    x = np.asarray(row, dtype=np.float64)
    single = x.ndim == 1
    out = encoder(x[None] if single else x)
    return out.reshape(out.shape[1:]) if single else out

