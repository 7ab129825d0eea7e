"""
Predict a dual perturbation from its two single perturbations.
"""
from pathlib import Path

import numpy as np
from django.conf import settings

from apps.core.exceptions import ConfigurationError, DataError
from apps.core.management.base import XTransferCommand
from apps.datasets.dataset import ExpressionDataset, combo_label, load_dataset, save_dataset
from apps.datasets.pairing import control_profile
from apps.evaluation.degs import deg_profile_table, linear_space, select_degs
from apps.evaluation.metrics import r_squared
from apps.evaluation.report import per_condition_mean, write_frame
from apps.transfer.checkpoints import check_gene_dim, load_checkpoint
from apps.transfer.inference import predict_combo_mean

COMBO_OPTIONS = {
    'checkpoint': None,
    'dataset': None,
    'pert_a': None,
    'pert_b': None,
    'cell_line': None,
    'actual': None,
    'deg_k': 20,
    'log1p': False,
}


class Command(XTransferCommand):
    help = 'Predict the mean profile of perturbations A and B applied together in one cell line'

    accepts_config = True
    output_help = 'Output predictions TSV'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', default=None, help='Checkpoint directory (required)')
        parser.add_argument('--dataset', default=None,
                            help='Dataset TSV with single-perturbation cells (required)')
        parser.add_argument('--pert-a', dest='pert_a', default=None, help='First perturbation (required)')
        parser.add_argument('--pert-b', dest='pert_b', default=None, help='Second perturbation (required)')
        parser.add_argument('--cell-line', dest='cell_line', default=None, help='Cell line (required)')
        parser.add_argument('--actual', default=None,
                            help='Dataset TSV with observed dual-perturbation cells; writes a DEG table')
        parser.add_argument('--deg-k', dest='deg_k', type=int, default=None, help='Rows of the DEG table (20)')
        parser.add_argument('--log1p', action='store_true', default=None, help='Apply log1p to datasets on load')

    def run(self, **options):
        resolved = self.resolve_options(
            options, COMBO_OPTIONS, required=('checkpoint', 'dataset', 'pert_a', 'pert_b', 'cell_line'))
        pert_a, pert_b = combo_label(resolved['pert_a']), combo_label(resolved['pert_b'])
        if pert_a == pert_b:
            raise ConfigurationError(f"--pert-a and --pert-b must differ (both {pert_a!r})")
        cell_line = resolved['cell_line']

        params, config = load_checkpoint(resolved['checkpoint'])
        dataset = load_dataset(resolved['dataset'], log1p=resolved['log1p'])
        check_gene_dim(config, dataset.n_genes)
        rows_a = self._single_rows(dataset, pert_a, cell_line)
        rows_b = self._single_rows(dataset, pert_b, cell_line)
        control = control_profile(dataset, cell_line)

        predicted = predict_combo_mean(params, dataset.values[rows_a], dataset.values[rows_b], control)
        label = combo_label(pert_a, pert_b)
        doses = dataset.obs['dose'].to_numpy(dtype=np.float64)[np.concatenate([rows_a, rows_b])]
        prediction = ExpressionDataset.from_arrays(
            gene_ids=dataset.gene_ids,
            cell_ids=[f'{cell_line}_{label}_pred'],
            cell_lines=[cell_line],
            perturbations=[label],
            doses=[float(doses.mean())],
            values=predicted,
        )

        output = Path(options.get('output') or Path(settings.XTRANSFER['OUTPUT_DIR']) / 'combo_prediction.tsv')
        save_dataset(prediction, output)
        if resolved['actual']:
            self._write_deg_table(resolved, dataset.gene_ids, label, cell_line, control, predicted[0], output)
        self.write_resolved(output, {**resolved, 'pert_a': pert_a, 'pert_b': pert_b})
        self.success(f"Wrote {label} prediction for {cell_line} to {output}")

    @staticmethod
    def _single_rows(dataset: ExpressionDataset, perturbation: str, cell_line: str) -> np.ndarray:
        rows = dataset.rows_for(perturbation=perturbation, cell_line=cell_line)
        if rows.size == 0:
            raise DataError(f"No cells for perturbation {perturbation!r} in cell line {cell_line!r}")
        return rows

    def _write_deg_table(self, resolved, gene_ids, label, cell_line, control, predicted, output: Path) -> None:
        actual_data = load_dataset(resolved['actual'], log1p=resolved['log1p'])
        if actual_data.gene_ids != gene_ids:
            raise DataError(f"Gene header of {resolved['actual']} does not match {resolved['dataset']}")
        rows = actual_data.rows_for(perturbation=label, cell_line=cell_line)
        if rows.size == 0:
            raise DataError(f"No observed {label!r} cells in cell line {cell_line!r}")
        actual = per_condition_mean(actual_data.values[rows])
        log1p = resolved['log1p']
        degs = select_degs(linear_space(control, log1p), linear_space(actual, log1p), k=resolved['deg_k'])
        table = deg_profile_table(control, actual, predicted, gene_ids, k=resolved['deg_k'], degs=degs)
        table_path = output.parent / f'{output.stem}.degs.csv'
        write_frame(table, table_path)
        self.stdout.write(
            f"R2 (all genes) {r_squared(predicted, actual):.4f}, "
            f"baseline {r_squared(control, actual):.4f}; DEG table {table_path}"
        )
