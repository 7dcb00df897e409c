"""Compensated summation used wherever tiny cost differences matter."""
from __future__ import annotations

import numpy as np


def neumaier_sum(a, axis: int = -1) -> np.ndarray:
    """Neumaier-compensated sum along ``axis``, vectorized over the other axes.

    Terms are added in index order, so the result is reproducible bit for bit.
    """
    a = np.moveaxis(np.asarray(a, dtype=float), axis, 0)
    if a.shape[0] == 0:
        return np.zeros(a.shape[1:])
    s = a[0].copy()
    c = np.zeros_like(s)
    for term in a[1:]:
        t = s + term
        big = np.abs(s) >= np.abs(term)
        c += np.where(big, (s - t) + term, (term - t) + s)
        s = t
    return s + c
