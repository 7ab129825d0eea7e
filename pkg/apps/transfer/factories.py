"""
Test factories for model configurations and paired batches.
"""
import factory
import numpy as np

from apps.datasets.pairing import PairBatch

from .config import LossWeights, ModelConfig


class LossWeightsFactory(factory.Factory):

    class Meta:
        model = LossWeights

    sim = 1.0
    orth = 1.0
    reco1 = 1.0
    reco2 = 1.0
    cross = 1.0


class ModelConfigFactory(factory.Factory):
    """Tiny models that train and gradient-check in milliseconds."""

    class Meta:
        model = ModelConfig

    gene_dim = 6
    encoder_hidden = (8, 4)
    latent_dim = 3
    dropout_rate = 0.0
    loss_weights = factory.SubFactory(LossWeightsFactory)
    lr = 1e-3
    epochs = 2
    batch_size = 4
    seed = factory.Sequence(lambda n: n)


def random_batch(gene_dim: int, size: int = 4, seed: int = 0, dtype=np.float32) -> PairBatch:
    """Paired-sample matrices drawn from a standard normal."""
    rng = np.random.default_rng(seed)
    return PairBatch(
        x_control=rng.normal(size=(size, gene_dim)).astype(dtype),
        x_a=rng.normal(size=(size, gene_dim)).astype(dtype),
        x_b=rng.normal(size=(size, gene_dim)).astype(dtype),
    )
