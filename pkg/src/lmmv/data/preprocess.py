import logging

import numpy as np

log = logging.getLogger(__name__)


def percentile_normalize(image: np.ndarray, fraction: float = 0.99) -> np.ndarray:
    """Shift to a zero minimum and scale so the ``fraction`` quantile lands on
    ``fraction``; brighter values keep the same slope and may exceed it."""
    x = np.asarray(image)
    if x.size == 0:
        raise ValueError("percentile_normalize: empty image")
    work = x.astype(np.float64)
    lo = work.min()
    span = np.quantile(work, fraction) - lo
    if span <= 0:
        log.info("percentile_normalize: constant image, returning zeros")
        return np.zeros_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    out = (work - lo) * (fraction / span)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def add_gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return (image + rng.normal(0.0, sigma, size=image.shape)).astype(image.dtype)
