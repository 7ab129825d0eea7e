"""
Synthetic expression data with a known latent structure.

Each cell line c has a basal vector s_c and each perturbation k an effect
vector p_k in a d-dimensional latent space. A cell of condition (c, k) is
rendered as f(W (s_c + p_k) + bias) + noise, so perturbation effects are
additive in latent space by construction and every prediction target is
available exactly through ``oracle_profile``.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from django.db import models
from scipy.spatial.distance import pdist

from apps.core.exceptions import ConfigurationError, FormatError
from apps.core.utils import PathLike, read_json, write_json
from apps.datasets.dataset import ExpressionDataset, control_label, split_combo

logger = logging.getLogger(__name__)

GROUND_TRUTH_VERSION = 1


class Nonlinearity(models.TextChoices):
    IDENTITY = 'identity', 'Identity'
    SOFTPLUS = 'softplus', 'Softplus'


@dataclass(frozen=True)
class SynthConfig:
    """Shape, noise and seed of a synthetic dataset."""
    genes: int = 200
    latent: int = 16
    perts: int = 24
    cell_lines: int = 2
    cells_per_condition: int = 40
    noise_sigma: float = 0.05
    nonlinearity: str = Nonlinearity.SOFTPLUS
    seed: int = 0

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If any field is out of range
        """
        if self.latent < 1 or self.genes < self.latent:
            raise ConfigurationError(f"Need genes >= latent >= 1, got genes={self.genes}, latent={self.latent}")
        if self.perts < 4:
            raise ConfigurationError(f"Need at least 4 perturbations, got {self.perts}")
        if self.cell_lines < 1:
            raise ConfigurationError(f"Need at least 1 cell line, got {self.cell_lines}")
        if self.cells_per_condition < 1:
            raise ConfigurationError(f"Need at least 1 cell per condition, got {self.cells_per_condition}")
        if not self.noise_sigma >= 0.0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.nonlinearity not in Nonlinearity.values:
            raise ConfigurationError(f"Unknown nonlinearity {self.nonlinearity!r}")

    @property
    def n_rows(self) -> int:
        return (self.perts + 1) * self.cell_lines * self.cells_per_condition


@dataclass
class GroundTruth:
    """Latent vectors and the latent-to-expression map of a synthetic dataset."""
    cell_line_names: List[str]
    perturbation_names: List[str]
    gene_ids: List[str]
    basal: np.ndarray          # [C, d]
    pert: np.ndarray           # [K, d]
    map_weights: np.ndarray    # [G, d]
    map_bias: np.ndarray       # [G]
    nonlinearity: str = Nonlinearity.IDENTITY
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.basal = np.asarray(self.basal, dtype=np.float64)
        self.pert = np.asarray(self.pert, dtype=np.float64)
        self.map_weights = np.asarray(self.map_weights, dtype=np.float64)
        self.map_bias = np.asarray(self.map_bias, dtype=np.float64)

    def basal_of(self, cell_line: str) -> np.ndarray:
        try:
            return self.basal[self.cell_line_names.index(cell_line)]
        except ValueError:
            raise ConfigurationError(f"Unknown cell line {cell_line!r}") from None

    def pert_of(self, perturbation: str) -> np.ndarray:
        try:
            return self.pert[self.perturbation_names.index(perturbation)]
        except ValueError:
            raise ConfigurationError(f"Unknown perturbation {perturbation!r}") from None

    def min_pert_distance(self) -> float:
        return float(pdist(self.pert).min()) if len(self.pert) > 1 else float('inf')


def cell_line_name(index: int) -> str:
    return f'line_{index}'


def perturbation_name(index: int) -> str:
    return f'pert_{index:02d}'


def apply_nonlinearity(values: np.ndarray, nonlinearity: str) -> np.ndarray:
    if nonlinearity == Nonlinearity.SOFTPLUS:
        return np.logaddexp(0.0, values)
    return values


def render_latent(gt: GroundTruth, latent: np.ndarray) -> np.ndarray:
    """Noiseless float32 profiles f(W z + bias) for latent rows ``latent``."""
    z = np.atleast_2d(latent)
    return apply_nonlinearity(z @ gt.map_weights.T + gt.map_bias, gt.nonlinearity).astype(np.float32)


def sample_ground_truth(config: SynthConfig) -> GroundTruth:
    """
    Draw latent vectors and the expression map for ``config``.

    Latents are standard normal; map weights are normal scaled by 1/sqrt(d).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    basal = rng.standard_normal((config.cell_lines, config.latent))
    pert = rng.standard_normal((config.perts, config.latent))
    weights = rng.standard_normal((config.genes, config.latent)) / np.sqrt(config.latent)
    bias = rng.standard_normal(config.genes)
    gt = GroundTruth(
        cell_line_names=[cell_line_name(i) for i in range(config.cell_lines)],
        perturbation_names=[perturbation_name(k) for k in range(config.perts)],
        gene_ids=[f'gene_{g:04d}' for g in range(config.genes)],
        basal=basal, pert=pert, map_weights=weights, map_bias=bias,
        nonlinearity=str(config.nonlinearity),
        meta={'seed': config.seed, 'noise_sigma': config.noise_sigma},
    )
    if not gt.min_pert_distance() > 0.0:
        raise ConfigurationError("Sampled perturbation vectors are not pairwise distinct")
    return gt


def render_dataset(config: SynthConfig, gt: GroundTruth) -> ExpressionDataset:
    """
    Render cells for every (cell line, control + perturbation) condition.

    Rows are grouped by cell line, then control, then perturbations in
    index order. Noise comes from a generator independent of the one that
    drew the ground truth. Noisy softplus cells are clipped at 0 so
    every profile stays non-negative.
    """
    rng = np.random.default_rng([config.seed, 1])
    cells = config.cells_per_condition
    control = control_label()
    cell_ids, lines, perts, doses, blocks = [], [], [], [], []
    for c, line in enumerate(gt.cell_line_names):
        conditions = [(control, np.zeros(gt.basal.shape[1]))] + [
            (name, gt.pert[k]) for k, name in enumerate(gt.perturbation_names)
        ]
        for label, effect in conditions:
            profile = render_latent(gt, gt.basal[c] + effect)[0].astype(np.float64)
            block = np.repeat(profile[None, :], cells, axis=0)
            if config.noise_sigma > 0:
                block = block + rng.normal(0.0, config.noise_sigma, size=block.shape)
                if gt.nonlinearity == Nonlinearity.SOFTPLUS:
                    block = np.maximum(block, 0.0)
            blocks.append(block)
            for i in range(cells):
                cell_ids.append(f'{line}_{label}_{i:04d}')
                lines.append(line)
                perts.append(label)
                doses.append(0.0 if label == control else 1.0)
    return ExpressionDataset.from_arrays(gt.gene_ids, cell_ids, lines, perts, doses, np.vstack(blocks))


def generate(config: SynthConfig) -> Tuple[ExpressionDataset, GroundTruth]:
    """
    Generate a synthetic dataset and its ground truth.

    Pure in ``config``: identical configs give identical datasets.
    """
    gt = sample_ground_truth(config)
    dataset = render_dataset(config, gt)
    logger.info("Generated synthetic dataset: %d cells x %d genes, %d perturbations, %d cell lines",
                len(dataset), dataset.n_genes, config.perts, config.cell_lines)
    return dataset, gt


def oracle_profile(gt: GroundTruth, cell_line: str, perturbations: Iterable[str] = ()) -> np.ndarray:
    """
    Noiseless profile of ``cell_line`` under the sum of the named perturbations.

    Dual labels such as ``A+B`` are expanded. An empty list gives the
    control target.

    Raises:
        ConfigurationError: If a cell line or perturbation is unknown
    """
    latent = gt.basal_of(cell_line).copy()
    for name in perturbations:
        for part in split_combo(name):
            latent = latent + gt.pert_of(part)
    return render_latent(gt, latent)[0]


def _encode_matrix(values: np.ndarray) -> list:
    if values.ndim == 1:
        return [repr(float(v)) for v in values]
    return [_encode_matrix(row) for row in values]


def _decode_matrix(values: Sequence, name: str) -> np.ndarray:
    try:
        return np.asarray(values, dtype=str).astype(np.float64)
    except ValueError as e:
        raise FormatError(f"ground truth field {name!r} holds non-numeric values") from e


def save_ground_truth(gt: GroundTruth, path: PathLike) -> None:
    """Write ground truth JSON; floats are stored as round-trippable decimal strings."""
    write_json(path, {
        'format_version': GROUND_TRUTH_VERSION,
        'nonlinearity': gt.nonlinearity,
        'cell_lines': gt.cell_line_names,
        'perturbations': gt.perturbation_names,
        'gene_ids': gt.gene_ids,
        'basal': _encode_matrix(gt.basal),
        'pert': _encode_matrix(gt.pert),
        'map_weights': _encode_matrix(gt.map_weights),
        'map_bias': _encode_matrix(gt.map_bias),
        'meta': gt.meta,
    })


def load_ground_truth(path: PathLike) -> GroundTruth:
    """
    Read a ground truth JSON written by ``save_ground_truth``.

    Raises:
        FormatError: If fields are missing or malformed
    """
    payload = read_json(path)
    required = ('nonlinearity', 'cell_lines', 'perturbations', 'gene_ids',
                'basal', 'pert', 'map_weights', 'map_bias')
    missing = [key for key in required if key not in payload]
    if missing:
        raise FormatError(f"ground truth {path} lacks {', '.join(missing)}")
    return GroundTruth(
        cell_line_names=list(payload['cell_lines']),
        perturbation_names=list(payload['perturbations']),
        gene_ids=list(payload['gene_ids']),
        basal=_decode_matrix(payload['basal'], 'basal'),
        pert=_decode_matrix(payload['pert'], 'pert'),
        map_weights=_decode_matrix(payload['map_weights'], 'map_weights'),
        map_bias=_decode_matrix(payload['map_bias'], 'map_bias'),
        nonlinearity=payload['nonlinearity'],
        meta=payload.get('meta', {}),
    )
