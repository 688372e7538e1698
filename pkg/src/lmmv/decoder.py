"""Causal transformer over per-timepoint summaries.

The prediction at position t only attends to positions <= t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, ModuleList, TransformerBlock, embedding_param
from .summarizer import AttentionConfig
from .tensor import ShapeError, Tensor


@dataclass
class TimepointPrediction:
    logits: np.ndarray  # (..., timepoints, classes)
    probs: np.ndarray


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=np.int8))


class TemporalDecoder(Module):
    def __init__(self, cfg: AttentionConfig, max_len: int, class_count: int,
                 rng: np.random.Generator, zero_head: bool = False):
        self.cfg = cfg
        self.max_len = max_len
        self.pos_embedding = embedding_param(rng, (max_len, cfg.d_model))
        self.blocks = ModuleList(TransformerBlock(cfg.d_model, cfg.heads, rng, cfg.penalty)
                                 for _ in range(cfg.layers))
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, class_count, rng)
        if zero_head:
            self.head.weight.data[:] = 0.0
            self.head.bias.data[:] = 0.0

    def forward(self, summaries: Tensor, positions=None) -> Tensor:
        """(B, L, d) summaries -> (B, L, classes) logits.

        ``positions`` are the absolute timepoint indices of the L inputs
        (default ``0..L-1``); they select the positional embeddings.
        """
        if summaries.ndim != 3:
            raise ShapeError("decode_sequence", [summaries.shape], "expected (batch, length, d)")
        length = summaries.shape[1]
        positions = np.arange(length) if positions is None else np.asarray(positions, dtype=np.int64)
        if length < 1 or positions.shape != (length,):
            raise ShapeError("decode_sequence", [summaries.shape, positions.shape])
        if positions.max() >= self.max_len or positions.min() < 0:
            raise ShapeError("decode_sequence", [summaries.shape, (self.max_len,)],
                             f"positions {positions.tolist()} exceed the positional table")
        h = summaries + T.embedding(self.pos_embedding, positions)
        key_mask = causal_mask(length)[None, None]
        for block in self.blocks:
            h = block(h, key_mask)
        return self.head(self.ln_f(h))

    def decode_sequence(self, summaries, positions=None) -> TimepointPrediction:
        x = T.as_tensor(summaries, dtype=self.head.weight.dtype)
        single = x.ndim == 2
        logits = self.forward(T.reshape(x, (1,) + x.shape) if single else x, positions)
        probs = T.softmax(logits)
        if single:
            return TimepointPrediction(logits.data[0], probs.data[0])
        return TimepointPrediction(logits.data, probs.data)
