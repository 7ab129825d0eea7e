"""
Expression datasets and their TSV representation.

A dataset is an annotated cell x gene matrix. The TSV layout is
``cell_id  cell_line  perturbation  dose  <gene_1> ... <gene_G>`` with one
row per cell; ``control`` marks unperturbed cells and dual perturbations
are written ``A+B`` with the two names sorted.
"""
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from django.conf import settings

from apps.core.exceptions import DataError, ParseError, SchemaError, ShapeError, StorageError
from apps.core.utils import PathLike, atomic_path

logger = logging.getLogger(__name__)

META_COLUMNS = ('cell_id', 'cell_line', 'perturbation', 'dose')


def control_label() -> str:
    return settings.XTRANSFER['CONTROL_LABEL']


def combo_label(*names: str) -> str:
    """Canonical label of a multi-perturbation: names sorted, joined by ``+``."""
    separator = settings.XTRANSFER['COMBO_SEPARATOR']
    parts = sorted(part for name in names for part in name.split(separator))
    return separator.join(parts)


def split_combo(label: str) -> List[str]:
    """Component perturbations of a (possibly dual) label."""
    return label.split(settings.XTRANSFER['COMBO_SEPARATOR'])


@dataclass
class ExpressionDataset:
    """
    Annotated cell x gene expression matrix.

    ``obs`` holds one row per cell with the META_COLUMNS; ``values`` is the
    matching [cells, genes] float32 matrix. Row order is file order.
    """
    gene_ids: List[str]
    obs: pd.DataFrame
    values: np.ndarray
    source: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        self.gene_ids = list(self.gene_ids)
        index = pd.Index(self.gene_ids)
        duplicates = sorted(set(index[index.duplicated()]))
        if duplicates:
            raise SchemaError(f"Duplicate gene ids: {', '.join(duplicates)}")
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.gene_ids):
            raise ShapeError(
                f"Expression matrix shape {self.values.shape} does not match {len(self.gene_ids)} genes"
            )
        if len(self.obs) != self.values.shape[0]:
            raise ShapeError(f"{len(self.obs)} annotations for {self.values.shape[0]} rows")
        missing = [column for column in META_COLUMNS if column not in self.obs.columns]
        if missing:
            raise SchemaError(f"Missing annotation columns: {', '.join(missing)}")
        self.obs = self.obs.loc[:, list(META_COLUMNS)].reset_index(drop=True)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)

    @property
    def is_control(self) -> np.ndarray:
        return (self.obs['perturbation'] == control_label()).to_numpy()

    def perturbations(self) -> List[str]:
        """Sorted non-control perturbation labels."""
        labels = self.obs.loc[~self.is_control, 'perturbation'].unique()
        return sorted(str(label) for label in labels)

    def cell_lines(self) -> List[str]:
        return sorted(str(line) for line in self.obs['cell_line'].unique())

    def subset(self, mask: np.ndarray) -> 'ExpressionDataset':
        """Rows selected by a boolean mask or index array, in original order."""
        index = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return ExpressionDataset(
            gene_ids=self.gene_ids,
            obs=self.obs.iloc[index].reset_index(drop=True),
            values=self.values[index],
            source=self.source,
        )

    def rows_for(self, perturbation: Optional[str] = None, cell_line: Optional[str] = None) -> np.ndarray:
        """Row indices matching a perturbation and/or cell line."""
        mask = np.ones(len(self), dtype=bool)
        if perturbation is not None:
            mask &= (self.obs['perturbation'] == perturbation).to_numpy()
        if cell_line is not None:
            mask &= (self.obs['cell_line'] == cell_line).to_numpy()
        return np.flatnonzero(mask)

    def conditions(self) -> Dict[Tuple[str, str], np.ndarray]:
        """Row indices of every non-control (cell_line, perturbation) condition, sorted by key."""
        perturbed = self.obs.loc[~self.is_control]
        groups = perturbed.groupby(['cell_line', 'perturbation'], sort=True).indices
        return {(str(line), str(pert)): perturbed.index.to_numpy()[rows]
                for (line, pert), rows in groups.items()}

    def to_frame(self) -> pd.DataFrame:
        """Annotations and values as one DataFrame in TSV column order."""
        values = pd.DataFrame(self.values, columns=self.gene_ids)
        return pd.concat([self.obs, values], axis=1)

    @classmethod
    def from_arrays(cls, gene_ids: Sequence[str], cell_ids: Iterable[str], cell_lines: Iterable[str],
                    perturbations: Iterable[str], doses: Iterable[float], values) -> 'ExpressionDataset':
        obs = pd.DataFrame({
            'cell_id': list(cell_ids),
            'cell_line': list(cell_lines),
            'perturbation': list(perturbations),
            'dose': np.asarray(list(doses), dtype=np.float64),
        })
        return cls(gene_ids=list(gene_ids), obs=obs, values=np.asarray(values, dtype=np.float32))


def _read_header(path: Path) -> List[str]:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            header = handle.readline().rstrip('\n').rstrip('\r')
    except OSError as e:
        raise StorageError(f"Cannot read dataset {path}: {e}") from e
    if not header:
        raise ParseError("empty file or missing header", line=1)
    return header.split('\t')


def _parse_numeric(frame: pd.DataFrame, columns: List[str]) -> np.ndarray:
    """Columns of ``frame`` as float64, or ParseError at the first bad cell."""
    parsed = frame[columns].apply(pd.to_numeric, errors='coerce')
    matrix = parsed.to_numpy(dtype=np.float64)
    bad = ~np.isfinite(matrix)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raw = frame[columns[col]].iloc[row]
        raise ParseError(f"non-numeric value {raw!r} in column {columns[col]!r}", line=int(row) + 2)
    return matrix


def load_dataset(path: PathLike, log1p: bool = False) -> ExpressionDataset:
    """
    Parse a dataset TSV.

    Args:
        path: TSV file with the standard header
        log1p: Apply log1p to expression values at ingestion

    Returns:
        ExpressionDataset with G inferred from the header and rows in file order

    Raises:
        ParseError: Ragged rows or non-numeric values (message names the line)
        SchemaError: Bad header or duplicate gene ids
        StorageError: Unreadable file
    """
    path = Path(path)
    header = _read_header(path)
    if tuple(header[:len(META_COLUMNS)]) != META_COLUMNS:
        raise SchemaError(f"Header must start with {', '.join(META_COLUMNS)}; got {header[:4]}")
    gene_ids = header[len(META_COLUMNS):]
    if not gene_ids:
        raise SchemaError("Dataset has no gene columns")
    index = pd.Index(gene_ids)
    duplicates = sorted(set(index[index.duplicated()]))
    if duplicates:
        raise SchemaError(f"Duplicate gene ids: {', '.join(duplicates)}")

    try:
        frame = pd.read_csv(
            path, sep='\t', dtype=str, keep_default_na=False,
            header=0, names=header, engine='c',
        )
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise ParseError(f"wrong number of fields ({e})",
                         line=int(match.group(1)) if match else None) from e
    except OSError as e:
        raise StorageError(f"Cannot read dataset {path}: {e}") from e

    ragged = frame.isna().any(axis=1).to_numpy()
    if ragged.any():
        row = int(np.flatnonzero(ragged)[0])
        raise ParseError(f"expected {len(header)} fields", line=row + 2)

    values = _parse_numeric(frame, gene_ids)
    dose = _parse_numeric(frame, ['dose'])[:, 0]
    if log1p:
        if (values <= -1.0).any():
            raise DataError("log1p ingestion needs values > -1")
        values = np.log1p(values)

    obs = pd.DataFrame({
        'cell_id': frame['cell_id'].to_numpy(),
        'cell_line': frame['cell_line'].to_numpy(),
        'perturbation': [
            label if label == control_label() else combo_label(label)
            for label in frame['perturbation']
        ],
        'dose': dose,
    })
    dataset = ExpressionDataset(gene_ids=gene_ids, obs=obs, values=values, source=str(path))
    logger.info("Loaded %s: %d cells x %d genes", path, len(dataset), dataset.n_genes)
    return dataset


def save_dataset(dataset: ExpressionDataset, path: PathLike, float_format: Optional[str] = None) -> None:
    """
    Write a dataset TSV atomically (UTF-8, LF line endings).

    The default float format round-trips float32 values exactly.
    """
    float_format = float_format or settings.XTRANSFER['FLOAT_FORMAT']
    frame = dataset.to_frame()
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, sep='\t', index=False, float_format=float_format,
                     lineterminator='\n', encoding='utf-8')
    logger.info("Wrote %s: %d cells x %d genes", path, len(dataset), dataset.n_genes)


def filter_dose(dataset: ExpressionDataset, dose: float) -> ExpressionDataset:
    """Keep control rows and perturbed rows at ``dose``."""
    at_dose = np.isclose(dataset.obs['dose'].to_numpy(dtype=np.float64), dose)
    return dataset.subset(dataset.is_control | at_dose)
