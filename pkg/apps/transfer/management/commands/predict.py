"""
Transfer a perturbation observed in one context onto another cell line.
"""
from pathlib import Path

import numpy as np

from django.conf import settings

from apps.core.exceptions import DataError
from apps.core.management.base import XTransferCommand
from apps.datasets.dataset import ExpressionDataset, combo_label, load_dataset, save_dataset
from apps.datasets.pairing import control_profile
from apps.transfer.checkpoints import check_gene_dim, load_checkpoint
from apps.transfer.inference import predict_transfer

PREDICT_OPTIONS = {
    'checkpoint': None,
    'dataset': None,
    'source_pert': None,
    'source_cell_line': None,
    'target_cell_line': None,
    'log1p': False,
}


class Command(XTransferCommand):
    help = 'Predict source-perturbed cells as if they came from the target cell line'

    accepts_config = True
    output_help = 'Output predictions TSV'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', default=None, help='Checkpoint directory (required)')
        parser.add_argument('--dataset', default=None,
                            help='Dataset TSV with source cells and target controls (required)')
        parser.add_argument('--source-pert', dest='source_pert', default=None,
                            help='Perturbation whose cells are transferred (required)')
        parser.add_argument('--source-cell-line', dest='source_cell_line', default=None,
                            help='Restrict source cells to one cell line')
        parser.add_argument('--target-cell-line', dest='target_cell_line', default=None,
                            help='Cell line whose control profile supplies the basal state (required)')
        parser.add_argument('--log1p', action='store_true', default=None,
                            help='Apply log1p to the dataset on load')

    def run(self, **options):
        resolved = self.resolve_options(
            options, PREDICT_OPTIONS, required=('checkpoint', 'dataset', 'source_pert', 'target_cell_line'))
        params, config = load_checkpoint(resolved['checkpoint'])
        dataset = load_dataset(resolved['dataset'], log1p=resolved['log1p'])
        check_gene_dim(config, dataset.n_genes)

        source = combo_label(resolved['source_pert'])
        rows = dataset.rows_for(perturbation=source, cell_line=resolved['source_cell_line'])
        if rows.size == 0:
            raise DataError(f"No cells for perturbation {source!r} in {resolved['dataset']}")
        target = resolved['target_cell_line']
        control = np.atleast_2d(control_profile(dataset, target))

        predicted = predict_transfer(params, dataset.values[rows], control)
        obs = dataset.obs.iloc[rows].reset_index(drop=True)
        obs['cell_line'] = target
        predictions = ExpressionDataset(gene_ids=dataset.gene_ids, obs=obs, values=predicted)

        output = Path(options.get('output') or Path(settings.XTRANSFER['OUTPUT_DIR']) / 'predictions.tsv')
        save_dataset(predictions, output)
        self.write_resolved(output, {**resolved, 'source_pert': source})
        self.success(f"Wrote {len(predictions)} predicted cells for {source} on {target} to {output}")
