"""
Export basal and perturbation embeddings of every cell as CSV.
"""
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

from apps.core.management.base import XTransferCommand
from apps.datasets.dataset import load_dataset
from apps.evaluation.report import write_frame
from apps.transfer.checkpoints import check_gene_dim, load_checkpoint
from apps.transfer.inference import encode_basal, encode_perturbation
from apps.transfer.model import Role

CHUNK_ROWS = 1024

EXPORT_OPTIONS = {'checkpoint': None, 'dataset': None, 'log1p': False}


def embedding_frame(params, dataset) -> pd.DataFrame:
    """Columns cell_id, cell_line, perturbation, role, z_0 .. z_{d-1}; basal rows first."""
    frames = []
    for role, encode in ((Role.BASAL, encode_basal), (Role.PERTURBATION, encode_perturbation)):
        chunks = [encode(params, dataset.values[start:start + CHUNK_ROWS]).values
                  for start in range(0, len(dataset), CHUNK_ROWS)]
        latent = np.concatenate(chunks, axis=0) if chunks else np.empty((0, params.config.latent_dim))
        frame = dataset.obs.loc[:, ['cell_id', 'cell_line', 'perturbation']].copy()
        frame['role'] = role.value
        values = pd.DataFrame(latent, columns=[f'z_{i}' for i in range(latent.shape[1])])
        frames.append(pd.concat([frame, values], axis=1))
    return pd.concat(frames, ignore_index=True)


class Command(XTransferCommand):
    help = 'Write basal and perturbation embeddings of a dataset as plot-ready CSV'

    accepts_config = True
    output_help = 'Output CSV'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', default=None, help='Checkpoint directory (required)')
        parser.add_argument('--dataset', default=None, help='Dataset TSV (required)')
        parser.add_argument('--log1p', action='store_true', default=None,
                            help='Apply log1p to the dataset on load')

    def run(self, **options):
        resolved = self.resolve_options(options, EXPORT_OPTIONS, required=('checkpoint', 'dataset'))
        params, config = load_checkpoint(resolved['checkpoint'])
        dataset = load_dataset(resolved['dataset'], log1p=resolved['log1p'])
        check_gene_dim(config, dataset.n_genes)

        frame = embedding_frame(params, dataset)
        output = Path(options.get('output') or Path(settings.XTRANSFER['OUTPUT_DIR']) / 'embeddings.csv')
        write_frame(frame, output)
        self.write_resolved(output, resolved)
        self.success(f"Wrote {len(frame)} embeddings ({config.latent_dim} dimensions) to {output}")
