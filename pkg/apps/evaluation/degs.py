"""
Differentially expressed gene selection.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from apps.core.exceptions import DomainError, ShapeError

# |lfc| within this distance below the threshold still counts as passing
DEG_THRESHOLD_TOLERANCE = 1e-6

DEG_TABLE_COLUMNS = ('gene_id', 'lfc', 'control', 'actual', 'predicted', 'actual_change', 'predicted_change')


@dataclass(frozen=True)
class DEGSet:
    """Gene indices sorted by |lfc| descending, with their log2 fold changes."""
    indices: List[int] = field(default_factory=list)
    lfc: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)

    def __bool__(self) -> bool:
        return bool(self.indices)


def linear_space(values, log1p_data: bool = False) -> np.ndarray:
    """Undo a log1p transform when the stored values carry one."""
    values = np.asarray(values, dtype=np.float64)
    return np.expm1(values) if log1p_data else values


def log_fold_change(ctrl_mean, pert_mean, epsilon: float = 1e-6) -> np.ndarray:
    """
    log2((pert + epsilon) / (ctrl + epsilon)) per gene.

    Raises:
        DomainError: If an input is negative or not finite
    """
    ctrl = np.asarray(ctrl_mean, dtype=np.float64).ravel()
    pert = np.asarray(pert_mean, dtype=np.float64).ravel()
    if ctrl.shape != pert.shape:
        raise ShapeError(f"Control mean has {ctrl.size} genes, perturbed mean has {pert.size}")
    for name, values in (('control', ctrl), ('perturbed', pert)):
        if not np.all(np.isfinite(values)):
            raise DomainError(f"{name} mean contains non-finite values")
        if np.any(values < 0):
            raise DomainError(
                f"{name} mean contains negative values; fold changes need linear-space expression"
            )
    return np.log2((pert + epsilon) / (ctrl + epsilon))


def select_degs(ctrl_mean, pert_mean, k: int = 50, threshold: float = 1.0,
                epsilon: float = 1e-6) -> DEGSet:
    """
    Genes with |log2 fold change| >= threshold, largest first, at most k.

    A gene short of the threshold by at most DEG_THRESHOLD_TOLERANCE
    passes, so an exact fold change of 2 still qualifies at threshold 1
    despite the pseudocount. Ties in |lfc| go to the lower gene index.
    Fewer than k qualifying genes give a smaller set.
    """
    lfc = log_fold_change(ctrl_mean, pert_mean, epsilon)
    magnitude = np.abs(lfc)
    passing = np.flatnonzero(magnitude >= threshold - DEG_THRESHOLD_TOLERANCE)
    order = passing[np.lexsort((passing, -magnitude[passing]))][:max(k, 0)]
    return DEGSet(indices=[int(i) for i in order], lfc=[float(lfc[i]) for i in order])


def deg_profile_table(ctrl_mean, actual_mean, pred_mean, gene_ids: Sequence[str], k: int = 20,
                      threshold: float = 1.0, epsilon: float = 1e-6,
                      degs: Optional[DEGSet] = None) -> pd.DataFrame:
    """
    Control, actual and predicted values of the top-k DEGs.

    DEGs are chosen from actual against control; the change columns are
    differences from the control mean.
    """
    ctrl = np.asarray(ctrl_mean, dtype=np.float64).ravel()
    actual = np.asarray(actual_mean, dtype=np.float64).ravel()
    pred = np.asarray(pred_mean, dtype=np.float64).ravel()
    if not ctrl.size == actual.size == pred.size == len(gene_ids):
        raise ShapeError("Profiles and gene ids disagree in length")
    if degs is None:
        degs = select_degs(ctrl, actual, k=k, threshold=threshold, epsilon=epsilon)
    index = np.asarray(degs.indices[:k], dtype=int)
    return pd.DataFrame({
        'gene_id': [gene_ids[i] for i in index],
        'lfc': degs.lfc[:k],
        'control': ctrl[index],
        'actual': actual[index],
        'predicted': pred[index],
        'actual_change': actual[index] - ctrl[index],
        'predicted_change': pred[index] - ctrl[index],
    }, columns=list(DEG_TABLE_COLUMNS))
