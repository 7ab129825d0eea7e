"""
Train a cross-transfer model from a JSON run configuration.
"""
import logging
from pathlib import Path

from apps.core.exceptions import DomainError, UsageError
from apps.core.management.base import XTransferCommand
from apps.core.utils import ensure_directory
from apps.evaluation.report import evaluate_model
from apps.transfer.config import load_run_config, parse_ablate
from apps.transfer.trainer import Trainer, TrainingResult

logger = logging.getLogger(__name__)

TEST_REPORT_STEM = 'test_report'


class Command(XTransferCommand):
    help = 'Train a model, write best/ and last/ checkpoints, the run manifest and a test-split report'

    accepts_config = True
    accepts_seed = True

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--ablate', default=None,
                            help='Comma-separated loss terms to switch off (sim, orth, reco1, reco2, cross)')
        parser.add_argument('--progress', action='store_true', help='Show a progress bar per epoch')
        parser.add_argument('--skip-test-report', action='store_true',
                            help='Do not evaluate the best checkpoint on the test split')

    def run(self, **options):
        raw = self.load_config(options)
        if raw is None:
            raise UsageError("train needs --config PATH")
        run_config = load_run_config(raw, seed=options.get('seed'), ablate=parse_ablate(options.get('ablate')))
        output = ensure_directory(self.output_dir(options))

        trainer = Trainer(run_config, output, progress=options.get('progress', False))
        result = trainer.run()
        self.write_resolved(output, trainer.run_config.to_dict())
        self.stdout.write(
            f"Best epoch {result.best_epoch} of {len(result.manifest.history)}; "
            f"checkpoints in {result.checkpoint_dir}"
        )
        if not options.get('skip_test_report'):
            self._test_report(trainer, result, output)
        self.success(f"Training finished: {output}")

    def _test_report(self, trainer: Trainer, result: TrainingResult, output: Path) -> None:
        """Score the best checkpoint on the test split by transfer onto each cell's own line."""
        evaluation = trainer.run_config.eval
        try:
            report, _ = evaluate_model(
                result.best, result.split.test,
                k=evaluation.k, threshold=evaluation.threshold,
                epsilon=evaluation.epsilon, log1p_data=evaluation.log1p_data,
            )
        except DomainError as e:
            logger.warning("Skipping the test report: %s", e)
            self.stderr.write(f"Test report skipped: {e}")
            return
        json_path, _ = report.write(output, TEST_REPORT_STEM)
        summary = report.summary()
        self.stdout.write(f"Test mean R2 (all genes): {self.format_score(summary['mean_r2_all'])} "
                          f"(baseline {self.format_score(summary['mean_baseline_r2_all'])})")
        self.stdout.write(f"Wrote {json_path}")
