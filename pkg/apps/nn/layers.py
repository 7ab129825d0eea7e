"""
Layer and network specifications.

A NetworkSpec is an ordered list of LayerSpec entries drawn from a fixed
vocabulary: dense, ReLU, batch normalization and dropout.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

from django.db import models

from apps.core.exceptions import ConfigurationError


class LayerKind(models.TextChoices):
    """Layer vocabulary understood by the network core."""
    DENSE = 'dense'
    RELU = 'relu'
    BATCHNORM = 'batchnorm'
    DROPOUT = 'dropout'


class Mode(models.TextChoices):
    """Forward-pass mode; batchnorm and dropout behave differently per mode."""
    TRAIN = 'train'
    EVAL = 'eval'


BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network."""
    kind: str
    in_dim: Optional[int] = None
    out_dim: Optional[int] = None
    rate: float = 0.0
    eps: float = BATCHNORM_EPS

    @classmethod
    def dense(cls, in_dim: int, out_dim: int) -> 'LayerSpec':
        return cls(LayerKind.DENSE, in_dim=in_dim, out_dim=out_dim)

    @classmethod
    def relu(cls) -> 'LayerSpec':
        return cls(LayerKind.RELU)

    @classmethod
    def batchnorm(cls, eps: float = BATCHNORM_EPS) -> 'LayerSpec':
        return cls(LayerKind.BATCHNORM, eps=eps)

    @classmethod
    def dropout(cls, rate: float) -> 'LayerSpec':
        return cls(LayerKind.DROPOUT, rate=rate)

    def validate(self) -> None:
        """Raise ConfigurationError if the layer violates its invariants."""
        if self.kind not in LayerKind.values:
            raise ConfigurationError(f"Unknown layer kind: {self.kind!r}")
        if self.kind == LayerKind.DENSE:
            if not self.in_dim or not self.out_dim or self.in_dim < 1 or self.out_dim < 1:
                raise ConfigurationError(
                    f"Dense layer needs in_dim, out_dim >= 1, got {self.in_dim}, {self.out_dim}"
                )
        elif self.kind == LayerKind.DROPOUT:
            if not 0.0 <= self.rate < 1.0:
                raise ConfigurationError(f"Dropout rate must be in [0, 1), got {self.rate}")
        elif self.kind == LayerKind.BATCHNORM:
            if not self.eps > 0:
                raise ConfigurationError(f"Batchnorm eps must be positive, got {self.eps}")


@dataclass(frozen=True)
class NetworkSpec:
    """
    Ordered stack of layers.

    Consecutive dense layers must chain (out_dim of one equals in_dim of the
    next) and the stack must start with a dense layer, which fixes the
    network input width.
    """
    layers: Sequence[LayerSpec] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))

    @property
    def in_dim(self) -> int:
        return self._dense_layers()[0].in_dim

    @property
    def out_dim(self) -> int:
        return self._dense_layers()[-1].out_dim

    def _dense_layers(self) -> List[LayerSpec]:
        dense = [layer for layer in self.layers if layer.kind == LayerKind.DENSE]
        if not dense:
            raise ConfigurationError("Network needs at least one dense layer")
        return dense

    def validate(self) -> None:
        """Raise ConfigurationError unless every layer is valid and dense widths chain."""
        if not self.layers:
            raise ConfigurationError("Network has no layers")
        if self.layers[0].kind != LayerKind.DENSE:
            raise ConfigurationError("Network must start with a dense layer")
        width = None
        for index, layer in enumerate(self.layers):
            layer.validate()
            if layer.kind == LayerKind.DENSE:
                if width is not None and layer.in_dim != width:
                    raise ConfigurationError(
                        f"Layer {index}: dense in_dim {layer.in_dim} does not chain with width {width}"
                    )
                width = layer.out_dim

    def widths(self) -> List[int]:
        """Feature width at the output of each layer."""
        self.validate()
        result = []
        width = self.in_dim
        for layer in self.layers:
            if layer.kind == LayerKind.DENSE:
                width = layer.out_dim
            result.append(width)
        return result


def mlp_spec(
    in_dim: int,
    hidden: Sequence[int],
    out_dim: int,
    dropout_rate: float = 0.0,
) -> NetworkSpec:
    """
    Build a dense stack: each hidden block is dense -> batchnorm -> ReLU -> dropout,
    followed by a linear dense head.
    """
    layers: List[LayerSpec] = []
    width = in_dim
    for size in hidden:
        layers.extend([
            LayerSpec.dense(width, size),
            LayerSpec.batchnorm(),
            LayerSpec.relu(),
            LayerSpec.dropout(dropout_rate),
        ])
        width = size
    layers.append(LayerSpec.dense(width, out_dim))
    spec = NetworkSpec(layers)
    spec.validate()
    return spec
