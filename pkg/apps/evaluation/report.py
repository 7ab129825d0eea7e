"""
Per-condition evaluation and the metrics report.

Every (cell_line, perturbation) condition of the actual data is scored by
comparing condition means: the predicted mean against the actual mean,
over all genes and over the DEGs chosen from the actual mean against the
cell line's control mean. Baseline columns score the control mean itself
as the prediction.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from apps.core.exceptions import ConfigurationError, DataError, SchemaError, UndefinedMetricError
from apps.core.utils import PathLike, atomic_path, ensure_directory, write_json
from apps.datasets.dataset import ExpressionDataset
from apps.datasets.pairing import control_profile
from apps.transfer.inference import predict_transfer
from apps.transfer.model import ModelParams

from .degs import DEG_TABLE_COLUMNS, DEGSet, deg_profile_table, linear_space, select_degs
from .metrics import METRIC_FUNCTIONS, METRICS

logger = logging.getLogger(__name__)

RECORD_COLUMNS = (
    'perturbation', 'cell_line', 'n_cells',
    'r2_all', 'r2_deg', 'ev_all', 'ev_deg', 'pcc_all', 'pcc_deg', 'spearman_all', 'spearman_deg',
    'baseline_r2_all', 'baseline_r2_deg', 'deg_count',
)
SCORE_COLUMNS = tuple(c for c in RECORD_COLUMNS if c not in ('perturbation', 'cell_line', 'n_cells', 'deg_count'))
TOP_RESPONDER_COLUMNS = (
    'perturbation', 'cell_line', 'deg_count',
    'r2_all', 'baseline_r2_all', 'r2_all_advantage',
    'r2_deg', 'baseline_r2_deg', 'r2_deg_advantage',
)


@dataclass
class ConditionRecord:
    """Scores of one condition; DEG fields are None when no DEG passes."""
    perturbation: str
    cell_line: str
    n_cells: int
    r2_all: Optional[float] = None
    r2_deg: Optional[float] = None
    ev_all: Optional[float] = None
    ev_deg: Optional[float] = None
    pcc_all: Optional[float] = None
    pcc_deg: Optional[float] = None
    spearman_all: Optional[float] = None
    spearman_deg: Optional[float] = None
    baseline_r2_all: Optional[float] = None
    baseline_r2_deg: Optional[float] = None
    deg_count: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _aggregate(records: List[ConditionRecord]) -> Dict[str, Dict[str, Optional[float]]]:
    aggregates = {}
    for column in SCORE_COLUMNS:
        values = [getattr(r, column) for r in records if getattr(r, column) is not None]
        aggregates[column] = {
            'mean': float(np.mean(values)) if values else None,
            'median': float(np.median(values)) if values else None,
            'n': len(values),
        }
    return aggregates


@dataclass
class MetricsReport:
    """
    Per-condition records plus mean/median aggregates, overall and per cell line.
    """
    records: List[ConditionRecord] = field(default_factory=list)
    settings: Dict[str, Any] = field(default_factory=dict)

    @property
    def aggregates(self) -> Dict[str, Dict[str, Optional[float]]]:
        return _aggregate(self.records)

    @property
    def per_cell_line(self) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
        lines = sorted({r.cell_line for r in self.records})
        return {line: _aggregate([r for r in self.records if r.cell_line == line]) for line in lines}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'settings': self.settings,
            'records': [r.as_dict() for r in self.records],
            'aggregates': self.aggregates,
            'per_cell_line': self.per_cell_line,
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per condition in the fixed column order."""
        return pd.DataFrame([r.as_dict() for r in self.records], columns=list(RECORD_COLUMNS))

    def summary(self) -> Dict[str, Optional[float]]:
        """Mean and median R2 over all genes and over DEGs, for model and baseline."""
        aggregates = self.aggregates
        return {
            f'{stat}_{column}': aggregates[column][stat]
            for column in ('r2_all', 'r2_deg', 'baseline_r2_all', 'baseline_r2_deg')
            for stat in ('mean', 'median')
        }

    def write(self, directory: PathLike, stem: str = 'report') -> Tuple[Path, Path]:
        """Write ``<stem>.json`` and ``<stem>.csv`` into ``directory``."""
        directory = ensure_directory(directory)
        json_path = directory / f'{stem}.json'
        csv_path = directory / f'{stem}.csv'
        write_json(json_path, self.to_dict())
        write_frame(self.to_frame(), csv_path)
        logger.info("Wrote %s and %s (%d conditions)", json_path, csv_path, len(self.records))
        return json_path, csv_path


def write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    """CSV with UTF-8, LF endings and empty cells for absent values."""
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, na_rep='', lineterminator='\n', encoding='utf-8')


def per_condition_mean(rows) -> np.ndarray:
    """
    Elementwise mean over the cells of one condition.

    Raises:
        DataError: If there are no rows
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0 or rows.size == 0:
        raise DataError("Cannot average an empty condition")
    return rows.mean(axis=0)


def _score(metric: str, pred: np.ndarray, actual: np.ndarray, condition: str) -> Optional[float]:
    try:
        return METRIC_FUNCTIONS[metric](pred, actual)
    except UndefinedMetricError as e:
        logger.warning("%s: %s", condition, e)
        return None


def score_condition(perturbation: str, cell_line: str, n_cells: int, pred_mean: np.ndarray,
                    actual_mean: np.ndarray, ctrl_mean: np.ndarray, degs: DEGSet) -> ConditionRecord:
    """Model and baseline scores of one condition from its three mean profiles."""
    condition = f'{cell_line}/{perturbation}'
    record = ConditionRecord(perturbation=perturbation, cell_line=cell_line, n_cells=n_cells,
                             deg_count=len(degs))
    index = np.asarray(degs.indices, dtype=int)
    for metric in METRICS:
        setattr(record, f'{metric}_all', _score(metric, pred_mean, actual_mean, condition))
        if index.size >= 2:
            setattr(record, f'{metric}_deg', _score(metric, pred_mean[index], actual_mean[index], condition))
    record.baseline_r2_all = _score('r2', ctrl_mean, actual_mean, condition)
    if index.size >= 2:
        record.baseline_r2_deg = _score('r2', ctrl_mean[index], actual_mean[index], condition)
    return record


def _check_genes(reference: ExpressionDataset, **others: ExpressionDataset) -> None:
    for name, other in others.items():
        if other.gene_ids != reference.gene_ids:
            raise SchemaError(f"Gene header of {name} does not match the actual data")


@dataclass(frozen=True)
class ConditionMeans:
    """Predicted, actual and control mean profiles of one condition."""
    cell_line: str
    perturbation: str
    n_cells: int
    predicted: np.ndarray
    actual: np.ndarray
    control: np.ndarray

    def degs(self, k: int = 50, threshold: float = 1.0, epsilon: float = 1e-6,
             log1p_data: bool = False) -> DEGSet:
        return select_degs(linear_space(self.control, log1p_data), linear_space(self.actual, log1p_data),
                           k=k, threshold=threshold, epsilon=epsilon)


def condition_means(predictions: ExpressionDataset, actual: ExpressionDataset,
                    controls: Optional[ExpressionDataset] = None) -> Iterator[ConditionMeans]:
    """
    Mean profiles of every perturbed condition of ``actual``, in (cell_line, perturbation) order.

    Raises:
        SchemaError: If gene headers differ
        DataError: If a condition has no predictions or its cell line no controls
    """
    controls = actual if controls is None else controls
    _check_genes(actual, predictions=predictions, controls=controls)
    control_means: Dict[str, np.ndarray] = {}
    for (cell_line, perturbation), rows in actual.conditions().items():
        predicted_rows = predictions.rows_for(perturbation=perturbation, cell_line=cell_line)
        if predicted_rows.size == 0:
            raise DataError(f"No predictions for {perturbation!r} in cell line {cell_line!r}")
        if cell_line not in control_means:
            control_means[cell_line] = control_profile(controls, cell_line).astype(np.float64)
        yield ConditionMeans(
            cell_line=cell_line,
            perturbation=perturbation,
            n_cells=int(rows.size),
            predicted=per_condition_mean(predictions.values[predicted_rows]),
            actual=per_condition_mean(actual.values[rows]),
            control=control_means[cell_line],
        )


def deg_tables(predictions: ExpressionDataset, actual: ExpressionDataset,
               controls: Optional[ExpressionDataset] = None, k: int = 20, threshold: float = 1.0,
               epsilon: float = 1e-6, log1p_data: bool = False) -> pd.DataFrame:
    """Top-k DEG profile table of every condition, stacked with its cell line and perturbation."""
    frames = []
    for means in condition_means(predictions, actual, controls):
        degs = means.degs(k=k, threshold=threshold, epsilon=epsilon, log1p_data=log1p_data)
        table = deg_profile_table(means.control, means.actual, means.predicted, actual.gene_ids,
                                  k=k, degs=degs)
        table.insert(0, 'perturbation', means.perturbation)
        table.insert(0, 'cell_line', means.cell_line)
        frames.append(table)
    if not frames:
        return pd.DataFrame(columns=['cell_line', 'perturbation', *DEG_TABLE_COLUMNS])
    return pd.concat(frames, ignore_index=True)


def evaluate(predictions: ExpressionDataset, actual: ExpressionDataset,
             controls: Optional[ExpressionDataset] = None, k: int = 50, threshold: float = 1.0,
             epsilon: float = 1e-6, log1p_data: bool = False) -> MetricsReport:
    """
    Score predicted profiles against actual ones, condition by condition.

    Args:
        predictions: Predicted cells, labeled like the actual cells
        actual: Observed perturbed cells; control rows are ignored
        controls: Dataset holding the control rows (defaults to ``actual``)
        k: Maximum number of DEGs
        threshold: Minimum |log2 fold change| of a DEG
        epsilon: Pseudocount of the fold change
        log1p_data: Stored values are log1p-transformed; DEGs are chosen
            after expm1

    Raises:
        SchemaError: If gene headers differ
        DataError: If a condition has no predictions or its cell line no controls
    """
    records = []
    for means in condition_means(predictions, actual, controls):
        degs = means.degs(k=k, threshold=threshold, epsilon=epsilon, log1p_data=log1p_data)
        records.append(score_condition(means.perturbation, means.cell_line, means.n_cells,
                                       means.predicted, means.actual, means.control, degs))
    if not records:
        logger.warning("No perturbed conditions to evaluate")
    return MetricsReport(
        records=records,
        settings={'k': k, 'threshold': threshold, 'epsilon': epsilon, 'log1p_data': log1p_data},
    )


def predict_own_context(params: ModelParams, dataset: ExpressionDataset,
                        controls: Optional[ExpressionDataset] = None) -> ExpressionDataset:
    """
    Predict every perturbed cell by transfer onto its own cell line's control.

    The result keeps the annotations of the perturbed rows.
    """
    controls = dataset if controls is None else controls
    perturbed = dataset.subset(~dataset.is_control)
    values = np.empty_like(perturbed.values)
    for (cell_line, _), rows in perturbed.conditions().items():
        ctrl = np.atleast_2d(control_profile(controls, cell_line))
        values[rows] = predict_transfer(params, perturbed.values[rows], ctrl)
    return ExpressionDataset(gene_ids=perturbed.gene_ids, obs=perturbed.obs, values=values,
                             source=dataset.source)


def evaluate_model(params: ModelParams, actual: ExpressionDataset, controls: Optional[ExpressionDataset] = None,
                   **options) -> Tuple[MetricsReport, ExpressionDataset]:
    """Predict the held-out cells with a trained model and score them."""
    predictions = predict_own_context(params, actual, controls)
    report = evaluate(predictions, actual, controls if controls is not None else actual, **options)
    return report, predictions


def top_responders(report: MetricsReport, fraction: float = 0.05) -> pd.DataFrame:
    """
    Conditions with the most DEGs and the model's advantage over the baseline.

    Ranked by DEG count descending, then baseline all-gene R2 ascending;
    the top ``fraction`` (at least one condition) is kept.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must be in (0, 1], got {fraction}")
    if not report.records:
        return pd.DataFrame(columns=list(TOP_RESPONDER_COLUMNS))
    frame = report.to_frame().astype({c: float for c in SCORE_COLUMNS})
    frame = frame.sort_values(['deg_count', 'baseline_r2_all', 'cell_line', 'perturbation'],
                              ascending=[False, True, True, True], na_position='last', kind='mergesort')
    keep = max(1, math.ceil(fraction * len(frame)))
    top = frame.head(keep).copy()
    top['r2_all_advantage'] = top['r2_all'] - top['baseline_r2_all']
    top['r2_deg_advantage'] = top['r2_deg'] - top['baseline_r2_deg']
    return top.loc[:, list(TOP_RESPONDER_COLUMNS)].reset_index(drop=True)

