"""
Generate a synthetic dataset with a known ground truth.
"""
from apps.core.forms import SynthConfigForm, validate_section
from apps.core.management.base import XTransferCommand
from apps.core.utils import ensure_directory
from apps.datasets.dataset import save_dataset
from apps.synth.generator import SynthConfig, generate, save_ground_truth

DATASET_NAME = 'dataset.tsv'
GROUND_TRUTH_NAME = 'ground_truth.json'

SYNTH_FLAGS = ('genes', 'latent', 'perts', 'cell_lines', 'cells', 'noise', 'nonlinearity', 'seed')


class Command(XTransferCommand):
    help = 'Write a synthetic dataset TSV and its ground_truth.json'

    accepts_config = True
    accepts_seed = True

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--genes', type=int, help='Number of genes G')
        parser.add_argument('--latent', type=int, help='True latent dimension d')
        parser.add_argument('--perts', type=int, help='Number of perturbations K (>= 4)')
        parser.add_argument('--cell-lines', dest='cell_lines', type=int, help='Number of cell lines C')
        parser.add_argument('--cells', type=int, help='Cells per condition')
        parser.add_argument('--noise', type=float, help='Gaussian noise sigma')
        parser.add_argument('--nonlinearity', choices=['identity', 'softplus'])

    def run(self, **options):
        raw = self.load_config(options) or {}
        for flag in SYNTH_FLAGS:
            if options.get(flag) is not None:
                raw[flag] = options[flag]
        values = validate_section(SynthConfigForm, raw, 'synth')

        config = SynthConfig(
            genes=values['genes'],
            latent=values['latent'],
            perts=values['perts'],
            cell_lines=values['cell_lines'],
            cells_per_condition=values['cells'],
            noise_sigma=values['noise'],
            nonlinearity=values['nonlinearity'],
            seed=values['seed'],
        )
        dataset, ground_truth = generate(config)

        output = ensure_directory(self.output_dir(options))
        save_dataset(dataset, output / DATASET_NAME)
        save_ground_truth(ground_truth, output / GROUND_TRUTH_NAME)
        self.write_resolved(output, values)

        self.success(f"Wrote {output / DATASET_NAME}: {len(dataset)} rows x {dataset.n_genes} genes")
