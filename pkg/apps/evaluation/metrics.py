"""
Agreement metrics between a predicted and an actual expression profile.

All four raise UndefinedMetricError instead of returning a placeholder
when an input is constant.
"""
from typing import Callable, Dict, Tuple

import numpy as np
from scipy.stats import pearsonr, spearmanr
from sklearn.metrics import explained_variance_score, r2_score

from apps.core.exceptions import ShapeError, UndefinedMetricError

METRICS = ('r2', 'ev', 'pcc', 'spearman')


def _vectors(pred, actual) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ShapeError(f"Prediction has {pred.size} values, actual has {actual.size}")
    if pred.size < 2:
        raise ShapeError("Metrics need at least 2 values")
    return pred, actual


def _require_varying(values: np.ndarray, name: str, metric: str) -> None:
    if np.ptp(values) == 0.0:
        raise UndefinedMetricError(f"{metric} is undefined for a constant {name} vector")


def r_squared(pred, actual) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot."""
    pred, actual = _vectors(pred, actual)
    _require_varying(actual, 'actual', 'R2')
    return float(r2_score(actual, pred))


def explained_variance(pred, actual) -> float:
    """1 - Var(actual - pred) / Var(actual), population variances."""
    pred, actual = _vectors(pred, actual)
    _require_varying(actual, 'actual', 'Explained variance')
    return float(explained_variance_score(actual, pred))


def pearson(pred, actual) -> float:
    pred, actual = _vectors(pred, actual)
    _require_varying(pred, 'predicted', 'Pearson correlation')
    _require_varying(actual, 'actual', 'Pearson correlation')
    return float(np.clip(pearsonr(pred, actual)[0], -1.0, 1.0))


def spearman(pred, actual) -> float:
    """Pearson correlation of average ranks."""
    pred, actual = _vectors(pred, actual)
    _require_varying(pred, 'predicted', 'Spearman correlation')
    _require_varying(actual, 'actual', 'Spearman correlation')
    return float(np.clip(spearmanr(pred, actual)[0], -1.0, 1.0))


METRIC_FUNCTIONS: Dict[str, Callable[..., float]] = {
    'r2': r_squared,
    'ev': explained_variance,
    'pcc': pearson,
    'spearman': spearman,
}
