"""
Score predictions (or a checkpoint) against observed perturbed cells.
"""
from apps.core.exceptions import ConfigurationError, UsageError
from apps.core.forms import EvalConfigForm, validate_section
from apps.core.management.base import XTransferCommand
from apps.core.utils import ensure_directory
from apps.datasets.dataset import load_dataset, save_dataset
from apps.evaluation.report import deg_tables, evaluate, evaluate_model, top_responders, write_frame
from apps.transfer.checkpoints import check_gene_dim, load_checkpoint

EVAL_FLAGS = ('k', 'threshold', 'epsilon', 'log1p_data')

EVAL_INPUTS = {
    'predictions': None,
    'checkpoint': None,
    'actual': None,
    'controls': None,
    'log1p': False,
    'deg_table': 0,
    'top_fraction': 0.05,
}


class Command(XTransferCommand):
    help = 'Write report.json, report.csv and top_responders.csv for predicted against actual cells'

    accepts_config = True

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--predictions', default=None, help='Predictions TSV')
        parser.add_argument('--checkpoint', default=None,
                            help='Checkpoint directory; predicts every actual cell on its own cell line')
        parser.add_argument('--actual', default=None, help='Observed cells TSV (required)')
        parser.add_argument('--controls', default=None, help='TSV with control cells (defaults to --actual)')
        parser.add_argument('--k', type=int, default=None, help='Maximum number of DEGs (50)')
        parser.add_argument('--threshold', type=float, default=None, help='Minimum |log2 fold change| (1.0)')
        parser.add_argument('--epsilon', type=float, default=None, help='Fold-change pseudocount (1e-6)')
        parser.add_argument('--log1p-data', dest='log1p_data', action='store_true', default=None,
                            help='Stored values are log1p-transformed; choose DEGs after expm1')
        parser.add_argument('--log1p', action='store_true', default=None,
                            help='Apply log1p to every dataset on load')
        parser.add_argument('--deg-table', dest='deg_table', type=int, default=None,
                            help='Also write the top-N DEG profile table of every condition (0: none)')
        parser.add_argument('--top-fraction', dest='top_fraction', type=float, default=None,
                            help='Fraction of conditions in top_responders.csv (0.05)')

    def run(self, **options):
        config = self.load_config(options) or {}
        # a training run config carries its evaluation settings in one section
        if 'eval' in config:
            if not isinstance(config['eval'], dict):
                raise ConfigurationError('eval must be a JSON object')
            config = dict(config['eval'])
        raw = {key: config.pop(key) for key in EVAL_FLAGS if key in config}
        resolved = self.resolve_options(options, EVAL_INPUTS, required=('actual',), config=config)
        if bool(resolved['predictions']) == bool(resolved['checkpoint']):
            raise UsageError("Pass exactly one of --predictions and --checkpoint")
        for flag in EVAL_FLAGS:
            if options.get(flag) is not None:
                raw[flag] = options[flag]
        settings = validate_section(EvalConfigForm, raw, 'eval')

        actual = load_dataset(resolved['actual'], log1p=resolved['log1p'])
        controls = actual
        if resolved['controls']:
            controls = load_dataset(resolved['controls'], log1p=resolved['log1p'])
        output = ensure_directory(self.output_dir(options))

        if resolved['checkpoint']:
            params, model_config = load_checkpoint(resolved['checkpoint'])
            check_gene_dim(model_config, actual.n_genes)
            report, predictions = evaluate_model(params, actual, controls, **settings)
            save_dataset(predictions, output / 'predictions.tsv')
        else:
            predictions = load_dataset(resolved['predictions'], log1p=resolved['log1p'])
            report = evaluate(predictions, actual, controls, **settings)

        report.write(output, 'report')
        write_frame(top_responders(report, resolved['top_fraction']), output / 'top_responders.csv')
        if resolved['deg_table'] > 0:
            table = deg_tables(predictions, actual, controls, k=resolved['deg_table'],
                               threshold=settings['threshold'], epsilon=settings['epsilon'],
                               log1p_data=settings['log1p_data'])
            write_frame(table, output / 'deg_table.csv')
        self.write_resolved(output, {**resolved, **settings})

        summary = report.summary()
        self.stdout.write(f"Conditions: {len(report.records)}")
        for scope in ('all', 'deg'):
            self.stdout.write(
                f"R2 ({scope}): mean {self.format_score(summary[f'mean_r2_{scope}'])}, "
                f"median {self.format_score(summary[f'median_r2_{scope}'])}; "
                f"baseline mean {self.format_score(summary[f'mean_baseline_r2_{scope}'])}, "
                f"median {self.format_score(summary[f'median_baseline_r2_{scope}'])}"
            )
        self.success(f"Wrote report to {output}")