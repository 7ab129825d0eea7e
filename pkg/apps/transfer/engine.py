"""
Full training objective, its reverse pass, and one optimization step.

Per batch the encoders run once per input (S_a, S_b from E_s; P_a, P_b
from E_p) and the decoder runs six times: on S_a and S_b for the shared
control reconstruction, on S_a + P_a and S_b + P_b for the perturbed
reconstruction, and on S_b + P_a and S_a + P_b for cross transfer.
Batchnorm running statistics are chained through consecutive passes of
the same network; parameter gradients are summed across passes.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from apps.core.exceptions import NumericError, ShapeError
from apps.core.forms import LOSS_TERMS
from apps.core.utils import derive_seeds
from apps.datasets.pairing import PairBatch, PairedSample, stack_pairs
from apps.nn.layers import Mode
from apps.nn.network import Trace, add_gradients, backward, forward
from apps.nn.optim import OptimizerState, adam_step
from apps.nn.tensors import ParamSet, Tensor

from .config import LossWeights
from .losses import orth_terms, sim_terms, squared_error
from .model import ModelParams

logger = logging.getLogger(__name__)

# decoder passes: name -> (basal input, perturbation input, target)
DECODER_PASSES = (
    ('reco1_a', 'sa', None, 'x'),
    ('reco1_b', 'sb', None, 'x'),
    ('reco2_a', 'sa', 'pa', 'xa'),
    ('reco2_b', 'sb', 'pb', 'xb'),
    ('cross_a', 'sb', 'pa', 'xa'),
    ('cross_b', 'sa', 'pb', 'xb'),
)


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted loss terms and their weighted total."""
    sim: float
    orth: float
    reco1: float
    reco2: float
    cross: float
    total: float

    @classmethod
    def from_terms(cls, terms: Dict[str, float], weights: LossWeights) -> 'LossBreakdown':
        for term in LOSS_TERMS:
            if not np.isfinite(terms[term]):
                raise NumericError(f"Non-finite {term} loss ({terms[term]})")
        total = sum(getattr(weights, term) * terms[term] for term in LOSS_TERMS)
        return cls(total=float(total), **{term: float(terms[term]) for term in LOSS_TERMS})

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, breakdowns: Sequence['LossBreakdown'], sizes: Sequence[int]) -> 'LossBreakdown':
        """Size-weighted mean of several batch breakdowns."""
        weights = np.asarray(sizes, dtype=np.float64) / float(np.sum(sizes))
        fields = {name: float(sum(w * getattr(b, name) for w, b in zip(weights, breakdowns)))
                  for name in (*LOSS_TERMS, 'total')}
        return cls(**fields)


@dataclass(frozen=True)
class ModelOptimizerStates:
    """One Adam state per network."""
    es: OptimizerState
    ep: OptimizerState
    d: OptimizerState

    @classmethod
    def fresh(cls, params: ModelParams, lr: Optional[float] = None) -> 'ModelOptimizerStates':
        lr = params.config.lr if lr is None else lr
        return cls(
            es=OptimizerState.fresh(params.es, lr=lr),
            ep=OptimizerState.fresh(params.ep, lr=lr),
            d=OptimizerState.fresh(params.d, lr=lr),
        )


@dataclass
class ObjectiveResult:
    """Loss breakdown, gradients per network, and parameters with updated running statistics."""
    breakdown: LossBreakdown
    params: ModelParams
    grads: Dict[str, ParamSet] = field(default_factory=dict)


class _Chain:
    """Forward passes through one network with batchnorm statistics carried along."""

    def __init__(self, spec, params: ParamSet, mode: str):
        self.spec = spec
        self.params = params
        self.mode = mode
        self.traces: Dict[str, Trace] = {}

    def __call__(self, name: str, x: Tensor, rng_seed: int, term: str) -> Tensor:
        try:
            y, trace = forward(self.spec, self.params, x, self.mode, rng_seed)
        except NumericError as e:
            raise NumericError(f"Non-finite {term} loss: {e}") from e
        self.traces[name] = trace
        if self.mode == Mode.TRAIN:
            self.params = trace.updated_params()
        return y

    def backward(self, upstream: Dict[str, Tensor]) -> Tuple[ParamSet, Dict[str, Tensor]]:
        grads: ParamSet = {}
        inputs: Dict[str, Tensor] = {}
        for name, trace in self.traces.items():
            result = backward(trace, upstream[name])
            grads = add_gradients(grads, result.params)
            inputs[name] = result.input
        return grads, inputs


def _as_batch(batch: Union[PairBatch, Sequence[PairedSample]]) -> PairBatch:
    return batch if isinstance(batch, PairBatch) else stack_pairs(batch)


def objective(params: ModelParams, batch: Union[PairBatch, Sequence[PairedSample]],
              weights: LossWeights, rng_seed: int = 0, mode: str = Mode.TRAIN,
              compute_grads: bool = True) -> ObjectiveResult:
    """
    Evaluate the weighted objective on a batch of pairs.

    Args:
        params: Current model parameters
        batch: Pairs (or their stacked matrices)
        weights: Loss weights
        rng_seed: Seed for the dropout masks of this batch
        mode: Train mode uses batch statistics and dropout; eval mode
            scores with running statistics (validation)
        compute_grads: Run the reverse pass (train mode only)

    Raises:
        ShapeError: If the batch has fewer than 2 pairs in train mode
        NumericError: If a loss term is not finite
    """
    batch = _as_batch(batch)
    if mode == Mode.TRAIN and len(batch) < 2:
        raise ShapeError("A training batch needs at least 2 pairs")
    dtype = params.es[next(iter(params.es))].dtype
    inputs = {
        'x': np.asarray(batch.x_control, dtype=dtype),
        'xa': np.asarray(batch.x_a, dtype=dtype),
        'xb': np.asarray(batch.x_b, dtype=dtype),
    }
    seeds = derive_seeds(rng_seed, 4 + len(DECODER_PASSES))

    es = _Chain(params.encoder_spec, params.es, mode)
    ep = _Chain(params.encoder_spec, params.ep, mode)
    dec = _Chain(params.decoder_spec, params.d, mode)
    latents = {
        'sa': es('sa', inputs['xa'], seeds[0], 'sim'),
        'sb': es('sb', inputs['xb'], seeds[1], 'sim'),
        'pa': ep('pa', inputs['xa'], seeds[2], 'orth'),
        'pb': ep('pb', inputs['xb'], seeds[3], 'orth'),
    }

    sim, sim_grads = sim_terms(latents['sa'], latents['sb'])
    orth, orth_grads = orth_terms(latents['pa'], latents['sa'], latents['pb'], latents['sb'])
    terms = {'sim': sim, 'orth': orth, 'reco1': 0.0, 'reco2': 0.0, 'cross': 0.0}
    output_grads: Dict[str, Tensor] = {}
    for index, (name, basal, pert, target) in enumerate(DECODER_PASSES):
        z = latents[basal] if pert is None else latents[basal] + latents[pert]
        term = name.rsplit('_', 1)[0]
        y = dec(name, z, seeds[4 + index], term)
        value, grad = squared_error(y, inputs[target])
        terms[term] += value
        output_grads[name] = getattr(weights, term) * grad

    breakdown = LossBreakdown.from_terms(terms, weights)
    updated = ModelParams(config=params.config, es=es.params, ep=ep.params, d=dec.params)
    if not compute_grads or mode != Mode.TRAIN:
        return ObjectiveResult(breakdown=breakdown, params=updated)

    d_grads, z_grads = dec.backward(output_grads)
    latent_grads = {
        'sa': weights.sim * sim_grads['sa'] + weights.orth * orth_grads['sa'],
        'sb': weights.sim * sim_grads['sb'] + weights.orth * orth_grads['sb'],
        'pa': weights.orth * orth_grads['pa'],
        'pb': weights.orth * orth_grads['pb'],
    }
    for name, basal, pert, _ in DECODER_PASSES:
        latent_grads[basal] = latent_grads[basal] + z_grads[name]
        if pert is not None:
            latent_grads[pert] = latent_grads[pert] + z_grads[name]

    es_grads, _ = es.backward({'sa': latent_grads['sa'], 'sb': latent_grads['sb']})
    ep_grads, _ = ep.backward({'pa': latent_grads['pa'], 'pb': latent_grads['pb']})
    return ObjectiveResult(
        breakdown=breakdown,
        params=updated,
        grads={'es': es_grads, 'ep': ep_grads, 'd': d_grads},
    )


def training_step(params: ModelParams, opt_states: ModelOptimizerStates,
                  batch: Union[PairBatch, Sequence[PairedSample]], weights: LossWeights,
                  rng_seed: int):
    """
    One forward pass, one reverse pass, and one Adam step per network.

    Returns:
        tuple: (new ModelParams, new ModelOptimizerStates, LossBreakdown)

    Raises:
        NumericError: If a loss term is not finite (names the first offending term)
    """
    result = objective(params, batch, weights, rng_seed=rng_seed, mode=Mode.TRAIN)
    new_networks = {}
    new_states = {}
    for name, network_params in result.params.networks():
        new_networks[name], new_states[name] = adam_step(
            network_params, result.grads[name], getattr(opt_states, name),
        )
    return (
        ModelParams(config=params.config, **new_networks),
        ModelOptimizerStates(**new_states),
        result.breakdown,
    )


def evaluation_loss(params: ModelParams, batches: Sequence[Sequence[PairedSample]],
                    weights: LossWeights) -> Optional[LossBreakdown]:
    """Size-weighted eval-mode objective over batches of pairs; None without pairs."""
    breakdowns, sizes = [], []
    for batch in batches:
        if not batch:
            continue
        result = objective(params, batch, weights, mode=Mode.EVAL, compute_grads=False)
        breakdowns.append(result.breakdown)
        sizes.append(len(batch))
    if not breakdowns:
        return None
    return LossBreakdown.mean(breakdowns, sizes)
