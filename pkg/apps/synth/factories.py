"""
Test factories for synthetic generation settings.
"""
import factory

from .generator import Nonlinearity, SynthConfig


class SynthConfigFactory(factory.Factory):
    """Small, noiseless synthetic configurations."""

    class Meta:
        model = SynthConfig

    genes = 12
    latent = 4
    perts = 6
    cell_lines = 2
    cells_per_condition = 5
    noise_sigma = 0.0
    nonlinearity = Nonlinearity.IDENTITY
    seed = factory.Sequence(lambda n: n)
