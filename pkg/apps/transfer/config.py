"""
Model and run configuration.

``ModelConfig`` describes one cross-transfer model; ``RunConfig`` is the
full JSON document a training run is driven by. Both are immutable; the
loader validates every section with the forms in ``apps.core.forms`` and
makes every default explicit.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Tuple

from apps.core.exceptions import ConfigurationError, ShapeError
from apps.core.forms import (
    LOSS_TERMS, DataConfigForm, EvalConfigForm, LossWeightsForm, ModelConfigForm,
    TrainConfigForm, validate_section,
)

logger = logging.getLogger(__name__)

RUN_SECTIONS = ('model', 'data', 'train', 'eval')


@dataclass(frozen=True)
class LossWeights:
    """Weights of the similarity, orthogonality, two reconstruction and cross-transfer terms."""
    sim: float = 1.0
    orth: float = 1.0
    reco1: float = 1.0
    reco2: float = 1.0
    cross: float = 1.0

    def __post_init__(self):
        for term in LOSS_TERMS:
            if not getattr(self, term) >= 0.0:
                raise ConfigurationError(f"Loss weight {term} must be non-negative")

    def ablate(self, terms: Iterable[str]) -> 'LossWeights':
        """Copy with the named terms switched off."""
        terms = list(terms)
        unknown = [term for term in terms if term not in LOSS_TERMS]
        if unknown:
            raise ConfigurationError(
                f"Unknown loss term(s) {', '.join(unknown)}; choose from {', '.join(LOSS_TERMS)}"
            )
        return replace(self, **{term: 0.0 for term in terms})

    def as_dict(self) -> Dict[str, float]:
        return {term: float(getattr(self, term)) for term in LOSS_TERMS}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimization settings of one model."""
    gene_dim: int
    encoder_hidden: Tuple[int, ...] = (1024, 512, 256)
    latent_dim: int = 128
    dropout_rate: float = 0.2
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 2e-4
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'encoder_hidden', tuple(int(h) for h in self.encoder_hidden))
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, 'loss_weights', LossWeights(**self.loss_weights))
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If a field is out of range
        """
        if self.gene_dim < 1:
            raise ConfigurationError(f"gene_dim must be >= 1, got {self.gene_dim}")
        if self.latent_dim < 1:
            raise ConfigurationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if any(h < 1 for h in self.encoder_hidden):
            raise ConfigurationError(f"encoder_hidden sizes must be >= 1, got {list(self.encoder_hidden)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.lr > 0.0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload['encoder_hidden'] = list(self.encoder_hidden)
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'ModelConfig':
        values = validate_section(ModelConfigForm, payload, 'model')
        if values['gene_dim'] is None:
            raise ConfigurationError("model.gene_dim is required")
        return cls(**values)


@dataclass(frozen=True)
class SplitConfig:
    mode: str = 'ratio'
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    test_perturbations: Tuple[str, ...] = ()
    val_fraction: float = 0.2


@dataclass(frozen=True)
class DataConfig:
    dataset_path: str
    split: SplitConfig = field(default_factory=SplitConfig)
    dose_filter: Optional[float] = None
    log1p: bool = False


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    checkpoint_dir: Optional[str] = None


@dataclass(frozen=True)
class EvalConfig:
    k: int = 50
    threshold: float = 1.0
    epsilon: float = 1e-6
    log1p_data: bool = False


@dataclass(frozen=True)
class RunConfig:
    """
    A fully resolved run configuration.

    ``model.gene_dim`` is None until the dataset is known; see ``with_gene_dim``.
    """
    model: Dict[str, Any]
    data: DataConfig
    train: TrainConfig
    eval: EvalConfig
    ablated: Tuple[str, ...] = ()

    def model_config(self) -> ModelConfig:
        if self.model.get('gene_dim') is None:
            raise ConfigurationError("gene_dim is not resolved yet")
        return ModelConfig(**self.model)

    def with_gene_dim(self, gene_dim: int) -> 'RunConfig':
        """
        Fill in (or check) the gene dimension from a dataset.

        Raises:
            ShapeError: If the configured gene_dim disagrees with the dataset
        """
        configured = self.model.get('gene_dim')
        if configured is not None and configured != gene_dim:
            raise ShapeError(f"Configured gene_dim {configured} does not match dataset with {gene_dim} genes")
        return replace(self, model={**self.model, 'gene_dim': gene_dim})

    def to_dict(self) -> Dict[str, Any]:
        """The resolved document, with every default explicit."""
        model = dict(self.model)
        model['encoder_hidden'] = list(model['encoder_hidden'])
        model['loss_weights'] = dict(model['loss_weights'])
        data = asdict(self.data)
        data['split']['ratios'] = list(self.data.split.ratios)
        data['split']['test_perturbations'] = list(self.data.split.test_perturbations)
        return {
            'model': model,
            'data': data,
            'train': asdict(self.train),
            'eval': asdict(self.eval),
        }


def load_run_config(raw: Dict[str, Any], seed: Optional[int] = None,
                    ablate: Iterable[str] = ()) -> RunConfig:
    """
    Validate a raw run configuration document.

    Args:
        raw: Parsed JSON document with sections model, data, train, eval
        seed: When given, overrides both model.seed and train.seed
        ablate: Loss terms whose weights are forced to 0

    Returns:
        RunConfig with every default explicit

    Raises:
        ConfigurationError: On unknown sections or keys, or invalid values
    """
    if not isinstance(raw, dict):
        raise ConfigurationError("Run configuration must be a JSON object")
    unknown = sorted(set(raw) - set(RUN_SECTIONS))
    if unknown:
        raise ConfigurationError(f"Unknown configuration sections: {', '.join(unknown)}")
    if 'data' not in raw:
        raise ConfigurationError("Run configuration needs a data section")

    model = validate_section(ModelConfigForm, raw.get('model'), 'model')
    data = validate_section(DataConfigForm, raw.get('data'), 'data')
    train = validate_section(TrainConfigForm, raw.get('train'), 'train')
    evaluation = validate_section(EvalConfigForm, raw.get('eval'), 'eval')

    if seed is not None:
        if seed < 0:
            raise ConfigurationError(f"--seed must be non-negative, got {seed}")
        model['seed'] = seed
        train['seed'] = seed

    ablated = tuple(dict.fromkeys(ablate))
    weights = LossWeights(**model['loss_weights']).ablate(ablated)
    model['loss_weights'] = weights.as_dict()
    model['encoder_hidden'] = tuple(model['encoder_hidden'])
    if ablated:
        logger.info("Ablating loss terms: %s", ', '.join(ablated))

    split = data['split']
    return RunConfig(
        model=model,
        data=DataConfig(
            dataset_path=data['dataset_path'],
            split=SplitConfig(
                mode=split['mode'],
                ratios=tuple(split['ratios']),
                test_perturbations=tuple(split['test_perturbations']),
                val_fraction=split['val_fraction'],
            ),
            dose_filter=data['dose_filter'],
            log1p=bool(data['log1p']),
        ),
        train=TrainConfig(seed=train['seed'], checkpoint_dir=train['checkpoint_dir'] or None),
        eval=EvalConfig(**evaluation),
        ablated=ablated,
    )


def parse_ablate(value: Optional[str]) -> List[str]:
    """Split an ``--ablate sim,orth,cross`` flag value."""
    if not value:
        return []
    return [term.strip() for term in value.split(',') if term.strip()]
