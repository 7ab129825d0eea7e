"""
Forward evaluation and reverse-mode gradients for dense networks.

Parameters live in a flat ParamSet keyed ``"<layer index>.<name>"``:
dense layers own ``weight`` [out, in] and ``bias`` [out]; batchnorm layers
own ``gamma``, ``beta`` and the running buffers ``running_mean`` and
``running_var``. Buffers are never touched by the optimizer; train-mode
forward passes return their updated values in the trace instead of
mutating the ParamSet.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from apps.core.exceptions import ShapeError, UsageError

from .layers import BATCHNORM_MOMENTUM, LayerKind, Mode, NetworkSpec
from .tensors import DTYPE, ParamSet, Tensor, as_matrix, ensure_finite

logger = logging.getLogger(__name__)

BUFFER_NAMES = ('running_mean', 'running_var')


def param_key(index: int, name: str) -> str:
    return f'{index}.{name}'


def is_buffer(key: str) -> bool:
    """True for batchnorm running statistics, which are not trained."""
    return key.rsplit('.', 1)[-1] in BUFFER_NAMES


def trainable(params: ParamSet) -> ParamSet:
    """The optimizer-visible subset of a ParamSet."""
    return {key: value for key, value in params.items() if not is_buffer(key)}


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """
    Deterministically initialize parameters for ``spec``.

    Dense weights are drawn from uniform(-1/sqrt(in_dim), 1/sqrt(in_dim))
    with a generator seeded by ``seed``; biases start at zero. Batchnorm
    starts with scale 1, shift 0, running mean 0 and running variance 1.

    Raises:
        ConfigurationError: If the spec is invalid
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    widths = spec.widths()
    params: ParamSet = {}
    for index, layer in enumerate(spec.layers):
        if layer.kind == LayerKind.DENSE:
            bound = 1.0 / np.sqrt(layer.in_dim)
            params[param_key(index, 'weight')] = rng.uniform(
                -bound, bound, size=(layer.out_dim, layer.in_dim)
            ).astype(DTYPE)
            params[param_key(index, 'bias')] = np.zeros(layer.out_dim, dtype=DTYPE)
        elif layer.kind == LayerKind.BATCHNORM:
            width = widths[index]
            params[param_key(index, 'gamma')] = np.ones(width, dtype=DTYPE)
            params[param_key(index, 'beta')] = np.zeros(width, dtype=DTYPE)
            params[param_key(index, 'running_mean')] = np.zeros(width, dtype=DTYPE)
            params[param_key(index, 'running_var')] = np.ones(width, dtype=DTYPE)
    return params


@dataclass
class Trace:
    """Everything a backward pass needs from one forward pass."""
    spec: NetworkSpec
    params: ParamSet
    mode: str
    input_shape: Tuple[int, int]
    output_shape: Tuple[int, int]
    records: List[Any] = field(default_factory=list)
    # updated batchnorm running statistics (train mode only)
    running: ParamSet = field(default_factory=dict)

    def updated_params(self) -> ParamSet:
        """The traced ParamSet with the new running statistics merged in."""
        merged = dict(self.params)
        merged.update(self.running)
        return merged


@dataclass
class Gradients:
    """Parameter gradients (trainable entries only) plus the input gradient."""
    params: ParamSet
    input: Tensor


def forward(
    spec: NetworkSpec,
    params: ParamSet,
    x: Tensor,
    mode: str = Mode.EVAL,
    rng_seed: int = 0,
) -> Tuple[Tensor, Trace]:
    """
    Evaluate the network on a [batch, in_dim] input.

    Dense computes x W^T + b. Batchnorm normalizes by batch statistics in
    train mode (and reports updated running statistics in the trace) and by
    running statistics in eval mode. Dropout is active only in train mode,
    where survivors are scaled by 1/(1 - rate); its masks come from a
    generator seeded with ``rng_seed``.

    Raises:
        ShapeError: On input width mismatch, or batch < 2 for train-mode batchnorm
        NumericError: If the output contains NaN or Inf
    """
    spec.validate()
    h = as_matrix(x, spec.in_dim)
    batch = h.shape[0]
    training = mode == Mode.TRAIN
    rng = np.random.default_rng(rng_seed)
    trace = Trace(
        spec=spec,
        params=params,
        mode=str(mode),
        input_shape=h.shape,
        output_shape=(batch, spec.out_dim),
    )

    for index, layer in enumerate(spec.layers):
        if layer.kind == LayerKind.DENSE:
            weight = params[param_key(index, 'weight')]
            bias = params[param_key(index, 'bias')]
            trace.records.append(h)
            h = h @ weight.T + bias

        elif layer.kind == LayerKind.RELU:
            mask = h > 0
            trace.records.append(mask)
            h = h * mask

        elif layer.kind == LayerKind.BATCHNORM:
            gamma = params[param_key(index, 'gamma')]
            beta = params[param_key(index, 'beta')]
            running_mean = params[param_key(index, 'running_mean')]
            running_var = params[param_key(index, 'running_var')]
            if training:
                if batch < 2:
                    raise ShapeError("Batchnorm in train mode needs a batch of at least 2")
                mean = h.mean(axis=0)
                var = h.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + layer.eps)
                normalized = (h - mean) * inv_std
                trace.records.append((normalized, inv_std))
                momentum = BATCHNORM_MOMENTUM
                trace.running[param_key(index, 'running_mean')] = (
                    (1.0 - momentum) * running_mean + momentum * mean
                ).astype(running_mean.dtype)
                trace.running[param_key(index, 'running_var')] = (
                    (1.0 - momentum) * running_var + momentum * var
                ).astype(running_var.dtype)
            else:
                normalized = (h - running_mean) / np.sqrt(running_var + layer.eps)
                trace.records.append(None)
            h = gamma * normalized + beta

        elif layer.kind == LayerKind.DROPOUT:
            if training and layer.rate > 0.0:
                keep = rng.random(h.shape) >= layer.rate
                scale = keep.astype(h.dtype) / (1.0 - layer.rate)
                trace.records.append(scale)
                h = h * scale
            else:
                trace.records.append(None)

    ensure_finite(h, 'network output')
    return h, trace


def backward(trace: Trace, upstream_grad: Tensor) -> Gradients:
    """
    Exact reverse-mode gradients of a train-mode forward pass.

    Args:
        trace: Trace returned by ``forward`` in train mode
        upstream_grad: Gradient of the objective w.r.t. the network output

    Returns:
        Gradients: dObjective/dParam for every trainable parameter, and dObjective/dInput

    Raises:
        UsageError: If the trace comes from an eval-mode pass
        ShapeError: If the upstream gradient does not match the output shape
        NumericError: If a gradient contains NaN or Inf
    """
    if trace.mode != Mode.TRAIN:
        raise UsageError("backward() needs a trace recorded in train mode")
    g = np.asarray(upstream_grad)
    if g.shape != trace.output_shape:
        raise ShapeError(
            f"Upstream gradient shape {g.shape} does not match output shape {trace.output_shape}"
        )

    params = trace.params
    grads: Dict[str, Tensor] = {}
    for index in range(len(trace.spec.layers) - 1, -1, -1):
        layer = trace.spec.layers[index]
        record = trace.records[index]

        if layer.kind == LayerKind.DENSE:
            weight = params[param_key(index, 'weight')]
            grads[param_key(index, 'weight')] = g.T @ record
            grads[param_key(index, 'bias')] = g.sum(axis=0)
            g = g @ weight

        elif layer.kind == LayerKind.RELU:
            g = g * record

        elif layer.kind == LayerKind.BATCHNORM:
            normalized, inv_std = record
            gamma = params[param_key(index, 'gamma')]
            batch = g.shape[0]
            grads[param_key(index, 'gamma')] = (g * normalized).sum(axis=0)
            grads[param_key(index, 'beta')] = g.sum(axis=0)
            d_norm = g * gamma
            g = (inv_std / batch) * (
                batch * d_norm
                - d_norm.sum(axis=0)
                - normalized * (d_norm * normalized).sum(axis=0)
            )

        elif layer.kind == LayerKind.DROPOUT:
            if record is not None:
                g = g * record

    for key, value in grads.items():
        ensure_finite(value, f'gradient of {key}')
    ensure_finite(g, 'input gradient')
    return Gradients(params=grads, input=g)


def add_gradients(total: ParamSet, update: ParamSet) -> ParamSet:
    """Sum two gradient collections key by key."""
    merged = dict(total)
    for key, value in update.items():
        merged[key] = merged[key] + value if key in merged else value
    return merged
