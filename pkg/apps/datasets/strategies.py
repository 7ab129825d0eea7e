"""
Drug-level split strategies implementing the Strategy pattern.

Every strategy assigns each non-control perturbation to exactly one of
train/val/test; all rows of a perturbation follow its assignment and
control rows are replicated into every split.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from django.db import models

from apps.core.exceptions import ConfigurationError

from .dataset import ExpressionDataset, combo_label

logger = logging.getLogger(__name__)


class SplitName(models.TextChoices):
    TRAIN = 'train'
    VAL = 'val'
    TEST = 'test'


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


@dataclass
class SplitResult:
    """Train/val/test views of one dataset plus the perturbation -> split map."""
    train: ExpressionDataset
    val: ExpressionDataset
    test: ExpressionDataset
    drug_assignment: Dict[str, str]

    def part(self, name: str) -> ExpressionDataset:
        return getattr(self, str(name))

    def drugs_in(self, name: str) -> List[str]:
        return sorted(drug for drug, split in self.drug_assignment.items() if split == name)

    def summary(self) -> Dict[str, int]:
        return {name: len(self.drugs_in(name)) for name in SplitName.values}


class SplitStrategy(ABC):
    """
    Abstract base class for drug-level split strategies.

    Subclasses decide which split each perturbation goes to; the base class
    materializes the dataset views.
    """

    @abstractmethod
    def assign(self, perturbations: List[str], rng: np.random.Generator) -> Dict[str, str]:
        """
        Map every perturbation label to a split name.

        Args:
            perturbations: Sorted non-control perturbation labels
            rng: Seeded generator; the only source of randomness

        Returns:
            dict: perturbation -> 'train' | 'val' | 'test'
        """
        pass

    @abstractmethod
    def get_name(self) -> str:
        """Return the strategy name for logging/debugging."""
        pass

    def split(self, dataset: ExpressionDataset, seed: int) -> SplitResult:
        """Split ``dataset`` at drug level, deterministically in ``seed``."""
        perturbations = dataset.perturbations()
        assignment = self.assign(perturbations, np.random.default_rng(seed))
        labels = dataset.obs['perturbation'].to_numpy()
        controls = dataset.is_control
        views = {}
        for name in SplitName.values:
            drugs = [drug for drug, split in assignment.items() if split == name]
            views[name] = dataset.subset(controls | np.isin(labels, drugs))
        result = SplitResult(
            train=views[SplitName.TRAIN],
            val=views[SplitName.VAL],
            test=views[SplitName.TEST],
            drug_assignment=assignment,
        )
        logger.info("%s split (seed %d): %s drugs", self.get_name(), seed, result.summary())
        return result


class RatioSplitStrategy(SplitStrategy):
    """
    Random drug-level split by (train, val, test) ratios.

    Drug counts per split are rounded half-up; val and test always receive
    at least one drug and train keeps the remainder.
    """

    def __init__(self, ratios: Sequence[float] = (0.8, 0.1, 0.1)):
        ratios = tuple(float(r) for r in ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios):
            raise ConfigurationError(f"Split ratios must be three positive numbers, got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"Split ratios must sum to 1, got {sum(ratios)}")
        self.ratios = ratios

    def assign(self, perturbations: List[str], rng: np.random.Generator) -> Dict[str, str]:
        total = len(perturbations)
        if total < 3:
            raise ConfigurationError(f"Drug-level split needs at least 3 perturbations, found {total}")
        _, val_ratio, test_ratio = self.ratios
        n_val = max(1, round_half_up(total * val_ratio))
        n_test = max(1, round_half_up(total * test_ratio))
        while total - n_val - n_test < 1:
            if n_val >= n_test and n_val > 1:
                n_val -= 1
            else:
                n_test -= 1
        n_train = total - n_val - n_test

        shuffled = [perturbations[i] for i in rng.permutation(total)]
        assignment = {}
        for position, drug in enumerate(shuffled):
            if position < n_train:
                assignment[drug] = SplitName.TRAIN.value
            elif position < n_train + n_val:
                assignment[drug] = SplitName.VAL.value
            else:
                assignment[drug] = SplitName.TEST.value
        return assignment

    def get_name(self) -> str:
        return "ratio"


class HoldoutSplitStrategy(SplitStrategy):
    """
    Named perturbations form the test set; the rest split train/val at drug level.
    """

    def __init__(self, test_perturbations: Sequence[str] = (), val_fraction: float = 0.2):
        if not test_perturbations:
            raise ConfigurationError("Holdout split needs at least one test perturbation")
        if not 0.0 <= val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {val_fraction}")
        self.test_perturbations = sorted({combo_label(name) for name in test_perturbations})
        self.val_fraction = float(val_fraction)

    def assign(self, perturbations: List[str], rng: np.random.Generator) -> Dict[str, str]:
        unknown = [name for name in self.test_perturbations if name not in perturbations]
        if unknown:
            raise ConfigurationError(f"Unknown holdout perturbations: {', '.join(unknown)}")
        remaining = [name for name in perturbations if name not in self.test_perturbations]
        n_val = round_half_up(len(remaining) * self.val_fraction)
        if self.val_fraction > 0 and len(remaining) >= 2:
            n_val = min(max(1, n_val), len(remaining) - 1)

        shuffled = [remaining[i] for i in rng.permutation(len(remaining))]
        assignment = {name: SplitName.TEST.value for name in self.test_perturbations}
        for position, drug in enumerate(shuffled):
            assignment[drug] = SplitName.VAL.value if position < n_val else SplitName.TRAIN.value
        return assignment

    def get_name(self) -> str:
        return "holdout"


class SplitStrategyFactory:
    """
    Factory class for creating split strategy instances.
    """

    _strategies = {
        'ratio': RatioSplitStrategy,
        'holdout': HoldoutSplitStrategy,
    }

    @classmethod
    def create_strategy(cls, strategy_name: str, **kwargs) -> SplitStrategy:
        """
        Create a split strategy instance by name.

        Raises:
            ConfigurationError: If the strategy name is not recognized
        """
        if strategy_name not in cls._strategies:
            available = ', '.join(cls._strategies.keys())
            raise ConfigurationError(f"Unknown split mode '{strategy_name}'. Available: {available}")
        return cls._strategies[strategy_name](**kwargs)

    @classmethod
    def get_available_strategies(cls) -> List[str]:
        return list(cls._strategies.keys())


def drug_level_split(dataset: ExpressionDataset, ratios: Sequence[float], seed: int) -> SplitResult:
    """Random drug-level split by ratios."""
    return RatioSplitStrategy(ratios).split(dataset, seed)


def holdout_split(dataset: ExpressionDataset, test_perturbations: Sequence[str],
                  val_fraction: float, seed: int) -> SplitResult:
    """Hold out named perturbations as the test set."""
    return HoldoutSplitStrategy(test_perturbations, val_fraction).split(dataset, seed)
