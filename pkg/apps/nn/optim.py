"""
Adam optimizer over ParamSets.

The update is pure: ``adam_step`` returns new parameters and a new state
and leaves its inputs untouched.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from apps.core.exceptions import ShapeError, UsageError

from .network import is_buffer
from .tensors import ParamSet

MAX_STEPS = 2 ** 31


@dataclass(frozen=True)
class OptimizerState:
    """First/second moment estimates and hyperparameters for one ParamSet."""
    first_moment: ParamSet = field(default_factory=dict)
    second_moment: ParamSet = field(default_factory=dict)
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParamSet, lr: float = 2e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> 'OptimizerState':
        """Zero moments shaped like the trainable entries of ``params``."""
        zeros = {key: np.zeros_like(value) for key, value in params.items() if not is_buffer(key)}
        return cls(
            first_moment=zeros,
            second_moment={key: value.copy() for key, value in zeros.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: ParamSet, grads: ParamSet, state: OptimizerState):
    """
    Apply one bias-corrected Adam update.

    Running batchnorm statistics pass through unchanged.

    Returns:
        tuple: (new ParamSet, new OptimizerState)

    Raises:
        ShapeError: If a gradient or moment is missing or mis-shaped
        UsageError: If the step counter would overflow
    """
    if state.step + 1 >= MAX_STEPS:
        raise UsageError("Adam step counter exhausted")
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step

    new_params: ParamSet = {}
    first: ParamSet = {}
    second: ParamSet = {}
    for key, value in params.items():
        if is_buffer(key):
            new_params[key] = value
            continue
        if key not in grads:
            raise ShapeError(f"Missing gradient for {key}")
        grad = grads[key]
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None or v is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        if grad.shape != value.shape or m.shape != value.shape or v.shape != value.shape:
            raise ShapeError(
                f"Shape mismatch for {key}: param {value.shape}, grad {grad.shape}, moment {m.shape}"
            )
        m = (state.beta1 * m + (1.0 - state.beta1) * grad).astype(value.dtype)
        v = (state.beta2 * v + (1.0 - state.beta2) * grad * grad).astype(value.dtype)
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[key] = (value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
        first[key] = m
        second[key] = v

    return new_params, replace(state, first_moment=first, second_moment=second, step=step)
