"""
The five loss terms and their gradients.

Latent-only terms (similarity, orthogonality) take embeddings directly.
Reconstruction-style terms are squared errors summed over genes and
averaged over the batch; ``squared_error`` is their shared building block
and the ``loss_reco*`` / ``loss_cross`` functions decode through the model.
Every ``*_terms`` function returns the value together with gradients with
respect to its inputs.
"""
from typing import Dict, Tuple

import numpy as np
from scipy.special import log_softmax

from apps.core.exceptions import ShapeError
from apps.nn.layers import Mode
from apps.nn.tensors import Tensor

from .inference import decode
from .model import LatentVector, ModelParams


def _values(latent) -> Tensor:
    return latent.values if isinstance(latent, LatentVector) else np.asarray(latent)


def _check_same_shape(**tensors: Tensor) -> int:
    shapes = {name: t.shape for name, t in tensors.items()}
    if len(set(shapes.values())) != 1:
        raise ShapeError(f"Loss inputs disagree in shape: {shapes}")
    first = next(iter(tensors.values()))
    if first.ndim != 2 or first.shape[0] < 1:
        raise ShapeError(f"Loss inputs must be [batch >= 1, width], got {first.shape}")
    return first.shape[0]


def orth_terms(pa, sa, pb, sb) -> Tuple[float, Dict[str, Tensor]]:
    """
    (1/N) sum_i (Pa_i . Sa_i)^2 + (Pb_i . Sb_i)^2 and its gradients.
    """
    pa, sa, pb, sb = (_values(v) for v in (pa, sa, pb, sb))
    n = _check_same_shape(pa=pa, sa=sa, pb=pb, sb=sb)
    dot_a = np.einsum('ij,ij->i', pa, sa)
    dot_b = np.einsum('ij,ij->i', pb, sb)
    value = float(np.mean(dot_a.astype(np.float64) ** 2 + dot_b.astype(np.float64) ** 2))
    scale = 2.0 / n
    grads = {
        'pa': scale * dot_a[:, None] * sa,
        'sa': scale * dot_a[:, None] * pa,
        'pb': scale * dot_b[:, None] * sb,
        'sb': scale * dot_b[:, None] * pb,
    }
    return value, grads


def sim_terms(sa, sb) -> Tuple[float, Dict[str, Tensor]]:
    """
    Batch mean of KL(softmax(Sa_i) || softmax(Sb_i)) in nats, and its gradients.
    """
    sa, sb = _values(sa), _values(sb)
    n = _check_same_shape(sa=sa, sb=sb)
    log_p = log_softmax(sa, axis=1)
    log_q = log_softmax(sb, axis=1)
    p = np.exp(log_p)
    q = np.exp(log_q)
    kl = np.sum(p * (log_p - log_q), axis=1)
    value = float(np.mean(kl.astype(np.float64)))
    grads = {
        'sa': p * (log_p - log_q - kl[:, None]) / n,
        'sb': (q - p) / n,
    }
    return value, grads


def squared_error(prediction: Tensor, target: Tensor) -> Tuple[float, Tensor]:
    """
    (1/N) sum_i ||prediction_i - target_i||^2 and its gradient w.r.t. prediction.
    """
    prediction = np.asarray(prediction)
    target = np.asarray(target, dtype=prediction.dtype)
    n = _check_same_shape(prediction=prediction, target=target)
    residual = prediction - target
    value = float(np.sum(residual.astype(np.float64) ** 2) / n)
    return value, (2.0 / n) * residual


def loss_orth(pa, sa, pb, sb) -> float:
    return orth_terms(pa, sa, pb, sb)[0]


def loss_sim(sa, sb) -> float:
    return sim_terms(sa, sb)[0]


def loss_reco1(params: ModelParams, sa, sb, x, mode: str = Mode.EVAL) -> float:
    """Reconstruct the shared unperturbed profile from both basal states."""
    x = np.asarray(x)
    return (squared_error(decode(params, _values(sa), mode), x)[0]
            + squared_error(decode(params, _values(sb), mode), x)[0])


def loss_reco2(params: ModelParams, sa, pa, sb, pb, xa, xb, mode: str = Mode.EVAL) -> float:
    """Reconstruct each perturbed profile from its own S + P."""
    return (squared_error(decode(params, _values(sa) + _values(pa), mode), np.asarray(xa))[0]
            + squared_error(decode(params, _values(sb) + _values(pb), mode), np.asarray(xb))[0])


def loss_cross(params: ModelParams, sa, pa, sb, pb, xa, xb, mode: str = Mode.EVAL) -> float:
    """
    Swap perturbation embeddings between the pair.

    D(Sb + Pa) is compared with Xa and D(Sa + Pb) with Xb: each transferred
    perturbation is scored against its own perturbed profile.
    """
    return (squared_error(decode(params, _values(sb) + _values(pa), mode), np.asarray(xa))[0]
            + squared_error(decode(params, _values(sa) + _values(pb), mode), np.asarray(xb))[0])
