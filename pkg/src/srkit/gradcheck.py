"""Central finite differences for checking hand-written backward passes."""
from __future__ import annotations

import numpy as np


def numerical_gradient(f, arr: np.ndarray, index, h: float = 1e-5) -> float:
    """d f() / d arr[index] by central differences.

    ``arr`` is perturbed in place and restored before returning, so ``f``
    should read it by reference (e.g. a parameter held in a store).
    """
    old = arr[index]
    arr[index] = old + h
    f_plus = float(f())
    arr[index] = old - h
    f_minus = float(f())
    arr[index] = old
    return (f_plus - f_minus) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def sample_indices(shape, count: int, rng: np.random.Generator):
    """``count`` distinct multi-indices drawn uniformly from an array of ``shape``."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def check_gradient(f, arr: np.ndarray, analytic: np.ndarray, count: int = 20,
                   h: float = 1e-5, seed: int = 0) -> float:
    """Largest relative error between ``analytic`` and finite differences at sampled coordinates."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for idx in sample_indices(arr.shape, count, rng):
        num = numerical_gradient(f, arr, idx, h)
        worst = max(worst, relative_error(float(analytic[idx]), num))
    return worst
