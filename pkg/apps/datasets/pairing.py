"""
Control-profile association and paired-sample construction.

Within a cell line the perturbations are shuffled and cut into two
near-equal groups; every pair joins one cell from each group and carries
the cell line's mean control profile.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from apps.core.exceptions import ConfigurationError, DataError

from .dataset import ExpressionDataset, control_label

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairedSample:
    """Control profile plus two differently perturbed cells of one cell line."""
    x_control: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    pert_a: str
    pert_b: str
    cell_line: str

    def __post_init__(self):
        if self.pert_a == self.pert_b:
            raise DataError(f"Paired sample needs two different perturbations, got {self.pert_a!r} twice")


@dataclass
class PairingResult:
    """Pairs of one split plus bookkeeping about what could not be paired."""
    pairs: List[PairedSample] = field(default_factory=list)
    skipped_cell_lines: List[str] = field(default_factory=list)
    # cell_line -> (group A rows, group B rows)
    group_rows: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @property
    def skipped_count(self) -> int:
        return len(self.skipped_cell_lines)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class PairBatch:
    """Row-stacked matrices of a batch of pairs."""
    x_control: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray

    def __len__(self) -> int:
        return self.x_a.shape[0]


def control_profile(dataset: ExpressionDataset, cell_line: str) -> np.ndarray:
    """
    Elementwise mean of all control rows of ``cell_line``.

    Raises:
        DataError: If the cell line has no control rows
    """
    rows = dataset.rows_for(perturbation=control_label(), cell_line=cell_line)
    if rows.size == 0:
        raise DataError(f"No control rows for cell line {cell_line!r}")
    return dataset.values[rows].mean(axis=0, dtype=np.float64).astype(np.float32)


def build_pairs(dataset: ExpressionDataset, seed: int) -> PairingResult:
    """
    Build paired samples for every cell line of a split.

    Cell lines are visited in sorted order with one generator seeded by
    ``seed``. Excess rows on the longer group are dropped; cell lines with
    fewer than two perturbations are skipped and reported.

    Raises:
        DataError: If a pairable cell line has no control rows
    """
    rng = np.random.default_rng(seed)
    result = PairingResult()
    labels = dataset.obs['perturbation'].to_numpy()
    lines = dataset.obs['cell_line'].to_numpy()
    controls = dataset.is_control

    for cell_line in dataset.cell_lines():
        in_line = (lines == cell_line) & ~controls
        drugs = sorted(str(label) for label in np.unique(labels[in_line]))
        if len(drugs) < 2:
            if drugs:
                logger.warning("Skipping cell line %s: only %d perturbation", cell_line, len(drugs))
                result.skipped_cell_lines.append(cell_line)
            continue
        x_control = control_profile(dataset, cell_line)

        shuffled = [drugs[i] for i in rng.permutation(len(drugs))]
        half = len(drugs) // 2
        group_a, group_b = shuffled[:half], shuffled[half:]
        rows_a = np.flatnonzero(in_line & np.isin(labels, group_a))
        rows_b = np.flatnonzero(in_line & np.isin(labels, group_b))
        rows_a = rows_a[rng.permutation(rows_a.size)]
        rows_b = rows_b[rng.permutation(rows_b.size)]
        result.group_rows[cell_line] = (int(rows_a.size), int(rows_b.size))

        for row_a, row_b in zip(rows_a, rows_b):
            result.pairs.append(PairedSample(
                x_control=x_control,
                x_a=dataset.values[row_a],
                x_b=dataset.values[row_b],
                pert_a=str(labels[row_a]),
                pert_b=str(labels[row_b]),
                cell_line=cell_line,
            ))

    logger.info("Built %d pairs (%d cell lines skipped)", len(result.pairs), result.skipped_count)
    return result


def batch_pairs(pairs: Sequence[PairedSample], batch_size: int, seed: int,
                epoch: int) -> List[List[PairedSample]]:
    """
    Shuffle pairs for one epoch and cut them into batches.

    A final batch smaller than 2 is merged into the previous batch.

    Raises:
        ConfigurationError: If batch_size < 2
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be at least 2, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
    batches = [
        [pairs[i] for i in order[start:start + batch_size]]
        for start in range(0, len(pairs), batch_size)
    ]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1].extend(tail)
    return batches


def stack_pairs(batch: Sequence[PairedSample]) -> PairBatch:
    """Stack a batch of pairs into [N, G] matrices."""
    if not batch:
        raise DataError("Cannot stack an empty batch")
    return PairBatch(
        x_control=np.stack([pair.x_control for pair in batch]),
        x_a=np.stack([pair.x_a for pair in batch]),
        x_b=np.stack([pair.x_b for pair in batch]),
    )
