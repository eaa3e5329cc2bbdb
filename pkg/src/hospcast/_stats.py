"""Small numeric helpers shared by the panel and evaluation modules."""
from __future__ import annotations

import math

import numpy as np


def pearson(x, y) -> float | None:
    """Pearson correlation of two equal-length arrays.

    Returns None when fewer than two points are given or either input is
    constant, since the coefficient is undefined there.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("pearson: inputs must have the same shape")
    if x.size < 2:
        return None
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def mean_sd(values, ddof: int = 0) -> tuple[float, float]:
    """Mean and standard deviation; SD is 0.0 when it is undefined for the ddof."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("mean_sd: no values")
    mean = float(v.mean())
    if v.size - ddof <= 0:
        return mean, 0.0
    return mean, float(v.std(ddof=ddof))
