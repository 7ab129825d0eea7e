"""
Encoding, decoding and the two prediction procedures.

Cross-context transfer decodes the target cell line's basal state plus the
perturbation embedding lifted from the source cells; dual-perturbation
composition decodes the basal state plus two perturbation embeddings.
"""
import logging
from typing import Optional, Sequence

import numpy as np

from apps.core.exceptions import ShapeError
from apps.nn.layers import Mode
from apps.nn.network import forward
from apps.nn.tensors import Tensor, as_matrix

from .model import LatentVector, ModelParams, Role, check_profiles

logger = logging.getLogger(__name__)


def encode_basal(params: ModelParams, x, mode: str = Mode.EVAL, rng_seed: int = 0) -> LatentVector:
    """S = E_s(X)."""
    x = check_profiles(params, x)
    values, _ = forward(params.encoder_spec, params.es, x, mode, rng_seed)
    return LatentVector(values=values, role=Role.BASAL)


def encode_perturbation(params: ModelParams, x, mode: str = Mode.EVAL, rng_seed: int = 0) -> LatentVector:
    """P = E_p(X)."""
    x = check_profiles(params, x)
    values, _ = forward(params.encoder_spec, params.ep, x, mode, rng_seed)
    return LatentVector(values=values, role=Role.PERTURBATION)


def decode(params: ModelParams, z, mode: str = Mode.EVAL, rng_seed: int = 0) -> Tensor:
    """X_hat = D(z); the final layer is linear."""
    z = as_matrix(z.values if isinstance(z, LatentVector) else z, params.config.latent_dim, 'latent')
    values, _ = forward(params.decoder_spec, params.d, z, mode, rng_seed)
    return values


def _broadcast_rows(matrices: Sequence[Tensor]) -> Sequence[Tensor]:
    rows = {m.shape[0] for m in matrices}
    if len(rows - {1}) > 1:
        raise ShapeError(f"Batch sizes {sorted(rows)} cannot be combined")
    batch = max(rows)
    return [np.broadcast_to(m, (batch, m.shape[1])) for m in matrices]


def compose(params: ModelParams, basal: LatentVector,
            perturbations: Sequence[Optional[LatentVector]] = ()) -> Tensor:
    """
    Decode a basal state plus any number of perturbation embeddings.

    A ``None`` perturbation contributes nothing, which reduces the
    prediction to the control reconstruction D(S). Single-row inputs
    broadcast against multi-row ones.
    """
    parts = [basal.values] + [p.values for p in perturbations if p is not None]
    parts = _broadcast_rows(parts)
    z = parts[0].copy()
    for part in parts[1:]:
        z = z + part
    return decode(params, z)


def mean_embedding(latent: LatentVector) -> LatentVector:
    """Row mean of an embedding, kept as a single-row LatentVector."""
    values = latent.values.mean(axis=0, keepdims=True, dtype=np.float64).astype(latent.values.dtype)
    return LatentVector(values=values, role=latent.role)


def predict_transfer(params: ModelParams, x_src_perturbed, x_tgt_control) -> Tensor:
    """
    D(E_s(X_tgt_control) + E_p(X_src_perturbed)), in eval mode.

    A single control row is applied to every source row.
    """
    basal = encode_basal(params, x_tgt_control)
    perturbation = encode_perturbation(params, x_src_perturbed)
    return compose(params, basal, [perturbation])


def predict_combo(params: ModelParams, x_pert_a, x_pert_b, x_control) -> Tensor:
    """D(E_s(X_control) + E_p(X_pert_a) + E_p(X_pert_b)), in eval mode."""
    basal = encode_basal(params, x_control)
    return compose(params, basal, [encode_perturbation(params, x_pert_a),
                                   encode_perturbation(params, x_pert_b)])


def predict_combo_mean(params: ModelParams, cells_a, cells_b, control_profile) -> Tensor:
    """
    One predicted mean profile for a dual perturbation.

    Each single perturbation's embedding is the mean of E_p over its cells.
    """
    p_a = mean_embedding(encode_perturbation(params, cells_a))
    p_b = mean_embedding(encode_perturbation(params, cells_b))
    basal = encode_basal(params, np.atleast_2d(control_profile))
    return compose(params, basal, [p_a, p_b])
