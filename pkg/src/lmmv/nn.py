"""Minimal module system and the transformer building blocks shared by the
tabular encoder, the view summarizer and the temporal decoder."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers Parameters and sub-Modules by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError("load_state_dict", [p.shape, arr.shape], name)
            p.data = arr.astype(p.dtype, copy=True)
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        self._items: list[Module] = list(modules)

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(glorot(rng, (d_in, d_out), d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        self.weight = Parameter(glorot(rng, (k, k, c_in, c_out), c_in * k * k, c_out * k * k))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadSelfAttention(Module):
    """Self-attention whose score matrix is masked with ``masked_softmax``.

    ``key_mask`` must broadcast to (batch, heads, queries, keys).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 penalty: float = T.DEFAULT_PENALTY):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by head count {heads}")
        self.heads = heads
        self.d_k = d // heads
        self.penalty = penalty
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, s, _ = x.shape
        return x.reshape(n, s, self.heads, self.d_k).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, key_mask: np.ndarray | None) -> Tensor:
        n, s, d = x.shape
        q = self._split(self.w_q(x))
        k = self._split(self.w_k(x))
        v = self._split(self.w_v(x))
        scores = T.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(self.d_k))
        if key_mask is None:
            att = T.softmax(scores)
        else:
            att = T.masked_softmax(scores, key_mask, self.penalty)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, s, d)
        return self.w_o(ctx)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then h + FF(LN(h)) with a GELU FF of width 4d."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 penalty: float = T.DEFAULT_PENALTY):
        self.ln_1 = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads, rng, penalty)
        self.ln_2 = LayerNorm(d)
        self.ff_in = Linear(d, 4 * d, rng)
        self.ff_out = Linear(4 * d, d, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None) -> Tensor:
        h = x + self.attn(self.ln_1(x), key_mask)
        return h + self.ff_out(T.gelu(self.ff_in(self.ln_2(h))))


def embedding_param(rng: np.random.Generator, shape) -> Parameter:
    return Parameter(rng.normal(0.0, 0.02, size=shape))


def name_parameters(module: Module) -> None:
    """Stamp each Parameter with its dotted path."""
    for name, p in module.named_parameters():
        p.name = name
