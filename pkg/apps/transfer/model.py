"""
Cross-transfer model structure.

Two architecture-identical but independent encoders map a G-dimensional
profile to the latent space: E_s extracts the basal state S and E_p the
perturbation embedding P. One decoder D maps latents back to profiles and
is shared by every decoding path.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, Tuple

import numpy as np
from django.db import models

from apps.core.exceptions import ShapeError
from apps.core.utils import derive_seeds
from apps.nn.layers import NetworkSpec, mlp_spec
from apps.nn.network import init_params
from apps.nn.tensors import ParamSet, Tensor, as_matrix, cast_params

from .config import ModelConfig

logger = logging.getLogger(__name__)

NETWORK_NAMES = ('es', 'ep', 'd')


class Role(models.TextChoices):
    BASAL = 'basal', 'Basal state'
    PERTURBATION = 'perturbation', 'Perturbation'


@dataclass(frozen=True)
class LatentVector:
    """A [batch, latent_dim] embedding tagged with what it encodes."""
    values: Tensor
    role: str

    @property
    def width(self) -> int:
        return self.values.shape[1]


@lru_cache(maxsize=32)
def network_specs(config: ModelConfig) -> Tuple[NetworkSpec, NetworkSpec]:
    """
    Encoder and decoder specs for ``config``.

    Encoder: G -> hidden... -> latent_dim with dense/batchnorm/ReLU/dropout
    blocks and a linear head. Decoder mirrors it: latent_dim -> reversed
    hidden -> G, also with a linear final layer.
    """
    encoder = mlp_spec(config.gene_dim, config.encoder_hidden, config.latent_dim, config.dropout_rate)
    decoder = mlp_spec(config.latent_dim, tuple(reversed(config.encoder_hidden)), config.gene_dim,
                       config.dropout_rate)
    return encoder, decoder


@dataclass(frozen=True)
class ModelParams:
    """Parameter sets of E_s, E_p and D together with their configuration."""
    config: ModelConfig
    es: ParamSet
    ep: ParamSet
    d: ParamSet

    @property
    def encoder_spec(self) -> NetworkSpec:
        return network_specs(self.config)[0]

    @property
    def decoder_spec(self) -> NetworkSpec:
        return network_specs(self.config)[1]

    def spec_for(self, name: str) -> NetworkSpec:
        return self.decoder_spec if name == 'd' else self.encoder_spec

    def networks(self) -> Iterator[Tuple[str, ParamSet]]:
        yield 'es', self.es
        yield 'ep', self.ep
        yield 'd', self.d

    def replace_networks(self, **paramsets: ParamSet) -> 'ModelParams':
        current = dict(self.networks())
        current.update(paramsets)
        return ModelParams(config=self.config, **current)

    def flat(self) -> Dict[str, Tensor]:
        """All tensors keyed ``<network>.<layer>.<name>``."""
        return {f'{name}.{key}': value for name, params in self.networks() for key, value in params.items()}

    @classmethod
    def from_flat(cls, config: ModelConfig, tensors: Dict[str, Tensor]) -> 'ModelParams':
        split: Dict[str, ParamSet] = {name: {} for name in NETWORK_NAMES}
        for full_key, value in tensors.items():
            network, _, key = full_key.partition('.')
            if network not in split:
                raise ShapeError(f"Unknown network prefix in tensor {full_key!r}")
            split[network][key] = value
        return cls(config=config, **split)

    def cast(self, dtype) -> 'ModelParams':
        return ModelParams(
            config=self.config,
            es=cast_params(self.es, dtype),
            ep=cast_params(self.ep, dtype),
            d=cast_params(self.d, dtype),
        )

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Tensor shapes a freshly initialized model of this config has."""
        return {key: value.shape for key, value in init_model(self.config).flat().items()}


def init_model(config: ModelConfig) -> ModelParams:
    """
    Initialize E_s, E_p and D from ``config.seed``.

    Each network draws from its own seed derived from the model seed, so
    the two encoders never share parameters.
    """
    encoder, decoder = network_specs(config)
    es_seed, ep_seed, d_seed = derive_seeds(config.seed, 3)
    return ModelParams(
        config=config,
        es=init_params(encoder, es_seed),
        ep=init_params(encoder, ep_seed),
        d=init_params(decoder, d_seed),
    )


def check_profiles(params: ModelParams, x, name: str = 'profiles') -> Tensor:
    """Validate a [batch, G] profile matrix against the model's gene dimension."""
    return as_matrix(x, params.config.gene_dim, name)


def parameter_count(params: ModelParams) -> int:
    return int(sum(np.prod(value.shape) for value in params.flat().values()))
