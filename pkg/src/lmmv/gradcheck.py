"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericFault, Parameter, Tensor, no_grad


@dataclass
class GradCheckReport:
    coords: list[tuple[str, int]] = field(default_factory=list)
    analytic: np.ndarray = field(default_factory=lambda: np.zeros(0))
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0))
    floor: float = 1e-8

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.analytic - self.numeric)

    @property
    def rel_errors(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return self.abs_errors / denom

    @property
    def max_rel(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def mean_rel(self) -> float:
        return float(self.rel_errors.mean()) if self.rel_errors.size else 0.0

    @property
    def max_abs(self) -> float:
        return float(self.abs_errors.max()) if self.abs_errors.size else 0.0

    def worst(self) -> tuple[str, int, float, float]:
        i = int(np.argmax(self.rel_errors))
        name, flat = self.coords[i]
        return name, flat, float(self.analytic[i]), float(self.numeric[i])


def finite_difference_check(
    scalar_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-3,
    sample_count: int = 100,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of ``scalar_fn`` with central differences.

    Coordinates are drawn uniformly (with a fixed seed) from the flattened
    concatenation of ``params``.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  All parameters must be float64.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 parameters; {p.name or p} is {p.dtype}")
        p.zero_grad()
    loss = scalar_fn()
    loss.backward()
    grads = [p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(sample_count, total), replace=False)
    bounds = np.cumsum(sizes)

    report = GradCheckReport(floor=floor)
    analytic, numeric = [], []
    for g in np.sort(picks):
        pi = int(np.searchsorted(bounds, g, side="right"))
        flat = int(g - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        view = p.data.reshape(-1)
        orig = view[flat]
        where = f"{p.name or pi}[{flat}]"
        try:
            with no_grad():
                view[flat] = orig + step
                f_plus = float(scalar_fn().data)
                view[flat] = orig - step
                f_minus = float(scalar_fn().data)
        except NumericFault as exc:
            raise NumericFault("finite_difference_check", f"{where}: {exc}") from exc
        finally:
            view[flat] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericFault("finite_difference_check", where)
        report.coords.append((p.name or str(pi), flat))
        analytic.append(grads[pi].reshape(-1)[flat])
        numeric.append((f_plus - f_minus) / (2 * step))
    report.analytic = np.asarray(analytic, dtype=np.float64)
    report.numeric = np.asarray(numeric, dtype=np.float64)
    return report
