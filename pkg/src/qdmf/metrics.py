"""Sample-level distances used as a stand-in for image quality scores."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError


def energy_distance(x, y) -> float:
    """V-statistic estimate of ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` between two point clouds."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionError(f"samples must be (n, d) with matching d, got {x.shape} and {y.shape}")
    if not len(x) or not len(y):
        raise DimensionError("empty sample")
    xy = cdist(x, y).mean()
    xx = cdist(x, x).mean()
    yy = cdist(y, y).mean()
    return float(2.0 * xy - xx - yy)
