"""
Tensor conventions for the network core.

Tensors are numpy arrays in row-major order. Model math runs in float32;
callers that need float64 (finite-difference checks) pass float64 arrays
and every operation preserves the dtype it is given.
"""
from typing import Dict

import numpy as np

from apps.core.exceptions import NumericError, ShapeError

Tensor = np.ndarray
ParamSet = Dict[str, Tensor]

DTYPE = np.float32


def as_tensor(values, dtype=DTYPE) -> Tensor:
    """Convert array-like values to a contiguous tensor of ``dtype``."""
    return np.ascontiguousarray(values, dtype=dtype)


def as_matrix(values, width: int, name: str = 'input') -> Tensor:
    """
    Validate a [batch, width] matrix, keeping its floating dtype.

    Raises:
        ShapeError: If ``values`` is not 2-D, is empty, or has the wrong width
    """
    matrix = np.asarray(values)
    if not np.issubdtype(matrix.dtype, np.floating):
        matrix = matrix.astype(DTYPE)
    if matrix.ndim != 2:
        raise ShapeError(f"{name} must be 2-D [batch, {width}], got shape {matrix.shape}")
    if matrix.shape[0] < 1:
        raise ShapeError(f"{name} has an empty batch")
    if matrix.shape[1] != width:
        raise ShapeError(f"{name} width {matrix.shape[1]} does not match expected {width}")
    return matrix


def ensure_finite(values: Tensor, name: str) -> Tensor:
    """Raise NumericError if ``values`` contains NaN or Inf."""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in {name}")
    return values


def copy_params(params: ParamSet) -> ParamSet:
    """Deep copy of a parameter set."""
    return {name: value.copy() for name, value in params.items()}


def cast_params(params: ParamSet, dtype) -> ParamSet:
    """Copy of a parameter set converted to ``dtype``."""
    return {name: value.astype(dtype) for name, value in params.items()}
