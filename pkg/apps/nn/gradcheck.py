"""
Central finite-difference checks for analytic gradients.
"""
from typing import Callable, Dict

import numpy as np

from .network import is_buffer
from .tensors import ParamSet

DEFAULT_STEP = 1e-3


def numerical_gradients(
    objective: Callable[[ParamSet], float],
    params: ParamSet,
    step: float = DEFAULT_STEP,
) -> ParamSet:
    """
    Central-difference gradient of ``objective`` w.r.t. every trainable entry.

    ``objective`` is called with perturbed copies, never with ``params`` itself.
    Use float64 parameters; float32 round-off swamps small steps.
    """
    grads: ParamSet = {}
    for key, value in params.items():
        if is_buffer(key):
            continue
        grad = np.zeros_like(value, dtype=np.float64)
        flat = grad.reshape(-1)
        for position in range(value.size):
            shifted = dict(params)
            plus = value.copy()
            plus.reshape(-1)[position] += step
            shifted[key] = plus
            upper = objective(shifted)
            minus = value.copy()
            minus.reshape(-1)[position] -= step
            shifted[key] = minus
            lower = objective(shifted)
            flat[position] = (upper - lower) / (2.0 * step)
        grads[key] = grad
    return grads


def max_relative_error(analytic: ParamSet, numeric: ParamSet, floor: float = 1e-6) -> Dict[str, float]:
    """
    Worst elementwise relative error per parameter.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
    entries whose true gradient is ~0 from dominating.
    """
    errors = {}
    for key, expected in numeric.items():
        actual = np.asarray(analytic[key], dtype=np.float64)
        scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), floor)
        errors[key] = float(np.max(np.abs(actual - expected) / scale))
    return errors
