"""Label-masked weighted cross-entropy, class weights, AdamW and the one-cycle
learning-rate schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data.catalog import MISSING_LABEL
from .tensor import NumericFault, Parameter, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def weighted_masked_ce(logits: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean weighted negative log-likelihood over labelled (patient, timepoint) cells.

    ``labels`` uses ``MISSING_LABEL`` (-1) for the ignored set.  The mean is
    over labelled cells; with none labelled the loss is 0 and every gradient
    is exactly zero.
    """
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise T.ShapeError("weighted_masked_ce", [logits.shape, labels.shape])
    weights = np.asarray(weights, dtype=logits.dtype)
    if (weights <= 0).any():
        raise ValueError("class weights must be positive")
    keep = labels != MISSING_LABEL
    count = int(keep.sum())
    if count == 0:
        return T.scale(T.sum(logits), 0.0)
    probs = T.softmax(logits)
    cells = np.nonzero(keep)
    y = labels[keep]
    if y.min() < 0 or y.max() >= logits.shape[-1]:
        raise ValueError(f"labels outside 0..{logits.shape[-1] - 1}")
    p = probs[cells + (y,)]
    if (p.data < PROB_FLOOR).any():
        log.warning("clamping %d probabilities below %g", int((p.data < PROB_FLOOR).sum()), PROB_FLOOR)
    nll = T.log(T.clamp_min(p, PROB_FLOOR)) * T.Tensor(weights[y], dtype=logits.dtype)
    return T.scale(T.sum(nll), -1.0 / count)


def class_weights(labels, class_count: int) -> np.ndarray:
    """Inverse-frequency weights rescaled to mean 1; unseen classes get the
    largest seen weight."""
    labels = np.asarray(labels).ravel()
    labels = labels[labels != MISSING_LABEL]
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if labels.size == 0:
        raise ValueError("class_weights: no labels present")
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    seen = counts > 0
    w = np.zeros(class_count)
    w[seen] = labels.size / (class_count * counts[seen])
    w[~seen] = w[seen].max()
    return w / w.mean()


@dataclass
class ScheduleConfig:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    initial_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.initial_div <= 1 or self.final_div <= 1:
            raise ValueError("divisors must exceed 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @property
    def warmup_steps(self) -> int:
        return min(max(1, int(round(self.warmup_frac * self.total_steps))), self.total_steps)


def one_cycle_lr(step: int, cfg: ScheduleConfig) -> float:
    """Cosine warm-up from max/initial_div to max, then cosine anneal to max/final_div."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside 0..{cfg.total_steps}")
    peak = cfg.max_lr
    start = peak / cfg.initial_div
    end = peak / cfg.final_div
    warm = cfg.warmup_steps
    if step <= warm:
        frac, lo, hi = step / warm, start, peak
    else:
        span = cfg.total_steps - warm
        frac, lo, hi = (step - warm) / span, peak, end
    return hi + (lo - hi) * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class OptimizerState:
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay (decay applied before the moment update)."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        names = [p.name for p in params]
        if len(set(names)) != len(names) or not all(names):
            raise ValueError("AdamW needs uniquely named parameters")
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()
        for p in params:
            self.state.exp_avg[p.name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[p.name] = np.zeros_like(p.data)

    def step(self, lr) -> None:
        """``lr`` is a float or a mapping parameter-name -> rate."""
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericFault("adamw_step", f"gradient of {p.name}")
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p in self.params:
            rate = lr[p.name] if isinstance(lr, dict) else lr
            if rate < 0:
                raise ValueError("learning rate must be >= 0")
            dt = p.dtype.type
            m = self.state.exp_avg[p.name]
            v = self.state.exp_avg_sq[p.name]
            g = p.grad
            if self.weight_decay:
                p.data = p.data * dt(1.0 - rate * self.weight_decay)
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * g * g
            denom = np.sqrt(v / dt(c2)) + dt(self.eps)
            p.data = p.data - dt(rate) * (m / dt(c1)) / denom

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
