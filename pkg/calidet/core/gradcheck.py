"""
Central finite differences for checking analytic gradients.
"""

from collections.abc import Callable

import numpy as np


def central_difference(
    fn: Callable[[], float],
    array: np.ndarray,
    step: float = 1e-5,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """
    Numerical gradient of the scalar `fn()` w.r.t. `array`, which is perturbed
    in place and restored. With `indices` (flat positions) only those entries
    are estimated; the rest of the result is NaN.
    """
    flat = array.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        original = flat[i]
        flat[i] = original + step
        f_plus = fn()
        flat[i] = original - step
        f_minus = fn()
        flat[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(array.shape)


def relative_error(
    analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, atol: float = 1e-8
) -> float:
    """
    |a - n| / max(|a| + |n|, floor) in the 2-norm, over the entries where `numeric`
    was estimated. Gradients smaller than `floor` in norm are measured against `floor`.
    A difference below `atol` is finite-difference noise on a vanishing gradient and
    counts as an exact match.
    """
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    difference = float(np.linalg.norm(a - n))
    if difference <= atol:
        return 0.0
    return difference / max(float(np.linalg.norm(a) + np.linalg.norm(n)), floor)
