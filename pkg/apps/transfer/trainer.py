"""
Training driver.

Builds the drug-level split and the paired samples, runs the epoch loop,
keeps the parameters with the lowest validation objective, writes the
``best/`` and ``last/`` checkpoints, and keeps a run manifest that is
rewritten atomically after every epoch.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from apps.core.exceptions import DataError, NumericError
from apps.core.utils import PathLike, derive_seeds, ensure_directory, file_sha256, write_json
from apps.datasets.dataset import ExpressionDataset, filter_dose, load_dataset
from apps.datasets.pairing import PairedSample, batch_pairs, build_pairs
from apps.datasets.strategies import SplitResult, SplitStrategyFactory

from .checkpoints import save_checkpoint
from .config import RunConfig
from .engine import LossBreakdown, ModelOptimizerStates, evaluation_loss, training_step
from .model import ModelParams, init_model, parameter_count

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run_manifest.json'
BEST_DIR = 'best'
LAST_DIR = 'last'


def step_seed(base: int, epoch: int, step: int) -> int:
    """Dropout seed of one training step."""
    return int(np.random.SeedSequence([base, epoch, step]).generate_state(1)[0])


@dataclass
class RunManifest:
    """
    Record of one training run.

    Everything except ``timings`` is a deterministic function of the
    resolved configuration and the dataset.
    """
    resolved_config: Dict[str, Any]
    seeds: Dict[str, int]
    dataset: Dict[str, Any]
    ablated: List[str]
    split: Dict[str, str] = field(default_factory=dict)
    pairing: Dict[str, Any] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)
    status: str = 'running'
    best_epoch: Optional[int] = None
    error: Optional[str] = None
    timings: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write(self, path: PathLike) -> None:
        write_json(path, self.to_dict())


@dataclass
class TrainingResult:
    best: ModelParams
    last: ModelParams
    best_epoch: int
    split: SplitResult
    manifest: RunManifest
    checkpoint_dir: Path


def load_run_dataset(run_config: RunConfig) -> ExpressionDataset:
    """Load the configured dataset, applying log1p and the dose filter."""
    data = run_config.data
    dataset = load_dataset(data.dataset_path, log1p=data.log1p)
    if data.dose_filter is not None:
        dataset = filter_dose(dataset, data.dose_filter)
        logger.info("Dose filter %s keeps %d cells", data.dose_filter, len(dataset))
    return dataset


def split_run_dataset(run_config: RunConfig, dataset: ExpressionDataset, seed: int) -> SplitResult:
    split = run_config.data.split
    if split.mode == 'holdout':
        strategy = SplitStrategyFactory.create_strategy(
            'holdout', test_perturbations=split.test_perturbations, val_fraction=split.val_fraction,
        )
    else:
        strategy = SplitStrategyFactory.create_strategy(split.mode, ratios=split.ratios)
    return strategy.split(dataset, seed)


class Trainer:
    """
    Train one model from a resolved RunConfig.

    Args:
        run_config: Resolved configuration (gene_dim may still be unset)
        output_dir: Directory for the manifest and, by default, the checkpoints
        progress: Show a per-epoch progress bar
    """

    def __init__(self, run_config: RunConfig, output_dir: PathLike, progress: bool = False):
        self.run_config = run_config
        self.output_dir = ensure_directory(output_dir)
        self.progress = progress
        checkpoint_dir = run_config.train.checkpoint_dir
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else self.output_dir / 'checkpoints'
        self.manifest_path = self.output_dir / MANIFEST_NAME

    def run(self, dataset: Optional[ExpressionDataset] = None) -> TrainingResult:
        """
        Train for the configured number of epochs.

        Raises:
            DataError: If the training split yields fewer than 2 pairs
            NumericError: On a non-finite loss; ``last/`` then holds the
                last finite parameters and the manifest is marked aborted
        """
        started = time.perf_counter()
        if dataset is None:
            dataset = load_run_dataset(self.run_config)
        self.run_config = self.run_config.with_gene_dim(dataset.n_genes)
        config = self.run_config.model_config()
        weights = config.loss_weights
        train_seed = self.run_config.train.seed
        split_seed, pair_seed, val_pair_seed, batch_seed, dropout_seed = derive_seeds(train_seed, 5)

        split = split_run_dataset(self.run_config, dataset, split_seed)
        train_pairs = build_pairs(split.train, pair_seed)
        val_pairs = build_pairs(split.val, val_pair_seed)
        if len(train_pairs) < 2:
            raise DataError(f"Training split yields {len(train_pairs)} pairs; at least 2 are needed")
        if not len(val_pairs):
            logger.warning("Validation split yields no pairs; selecting by training loss")
        val_batches = self._chunk(val_pairs.pairs, config.batch_size)

        manifest = RunManifest(
            resolved_config=self.run_config.to_dict(),
            seeds={'model': config.seed, 'train': train_seed, 'split': split_seed, 'pairs': pair_seed,
                   'val_pairs': val_pair_seed, 'batches': batch_seed, 'dropout': dropout_seed},
            dataset={
                'path': str(self.run_config.data.dataset_path),
                'sha256': file_sha256(self.run_config.data.dataset_path),
                'cells': len(dataset),
                'genes': dataset.n_genes,
            },
            ablated=list(self.run_config.ablated),
            split=dict(sorted(split.drug_assignment.items())),
            pairing={
                'train_pairs': len(train_pairs),
                'val_pairs': len(val_pairs),
                'skipped_cell_lines': train_pairs.skipped_cell_lines + val_pairs.skipped_cell_lines,
            },
            timings={'started_at': datetime.now(timezone.utc).isoformat(), 'epoch_seconds': []},
        )
        manifest.write(self.manifest_path)

        params = init_model(config)
        states = ModelOptimizerStates.fresh(params)
        logger.info("Training %d parameters on %d pairs (%d validation) for %d epochs",
                    parameter_count(params), len(train_pairs), len(val_pairs), config.epochs)

        best, best_epoch, best_total = None, 0, np.inf
        for epoch in range(1, config.epochs + 1):
            epoch_started = time.perf_counter()
            batches = batch_pairs(train_pairs.pairs, config.batch_size, batch_seed, epoch)
            breakdowns, sizes = [], []
            for step, batch in enumerate(tqdm(batches, desc=f"Epoch {epoch}", leave=False,
                                              disable=not self.progress)):
                try:
                    params, states, breakdown = training_step(
                        params, states, batch, weights, step_seed(dropout_seed, epoch, step),
                    )
                except NumericError as e:
                    self._abort(manifest, params, best, best_epoch, epoch, e)
                    raise
                breakdowns.append(breakdown)
                sizes.append(len(batch))

            train_loss = LossBreakdown.mean(breakdowns, sizes)
            val_loss = evaluation_loss(params, val_batches, weights)
            selection = val_loss if val_loss is not None else train_loss
            if selection.total < best_total:
                best, best_epoch, best_total = params, epoch, selection.total

            manifest.history.append({
                'epoch': epoch,
                'train': train_loss.as_dict(),
                'val': val_loss.as_dict() if val_loss is not None else None,
            })
            manifest.best_epoch = best_epoch
            manifest.timings['epoch_seconds'].append(round(time.perf_counter() - epoch_started, 3))
            manifest.write(self.manifest_path)
            logger.info("Epoch %d: train total %.6g, val total %s", epoch, train_loss.total,
                        f'{val_loss.total:.6g}' if val_loss is not None else 'n/a')

        save_checkpoint(best, self.checkpoint_dir / BEST_DIR, extra={'epoch': best_epoch})
        save_checkpoint(params, self.checkpoint_dir / LAST_DIR, extra={'epoch': config.epochs})
        manifest.status = 'completed'
        manifest.timings['total_seconds'] = round(time.perf_counter() - started, 3)
        manifest.write(self.manifest_path)
        return TrainingResult(best=best, last=params, best_epoch=best_epoch, split=split,
                              manifest=manifest, checkpoint_dir=self.checkpoint_dir)

    @staticmethod
    def _chunk(pairs: List[PairedSample], size: int) -> List[List[PairedSample]]:
        return [pairs[start:start + size] for start in range(0, len(pairs), size)]

    def _abort(self, manifest: RunManifest, params: ModelParams, best: Optional[ModelParams],
               best_epoch: int, epoch: int, error: Exception) -> None:
        logger.error("Aborting at epoch %d: %s", epoch, error)
        save_checkpoint(params, self.checkpoint_dir / LAST_DIR, extra={'epoch': epoch - 1, 'aborted': True})
        if best is not None:
            save_checkpoint(best, self.checkpoint_dir / BEST_DIR, extra={'epoch': best_epoch})
        manifest.status = 'aborted'
        manifest.error = str(error)
        manifest.write(self.manifest_path)
