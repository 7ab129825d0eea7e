"""
Tests for metrics, DEG selection, reports and the evaluate command.
"""
import io
import json
import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from apps.core.exceptions import (
    ConfigurationError, DataError, DomainError, SchemaError, ShapeError, UndefinedMetricError,
)
from apps.datasets.dataset import ExpressionDataset, save_dataset
from apps.synth.generator import SynthConfig, generate

from .degs import DEG_TABLE_COLUMNS, DEG_THRESHOLD_TOLERANCE, deg_profile_table, linear_space, select_degs
from .metrics import explained_variance, pearson, r_squared, spearman
from .report import RECORD_COLUMNS, deg_tables, evaluate, per_condition_mean, top_responders


def brute_r2(pred, actual):
    residual = sum((a - p) ** 2 for p, a in zip(pred, actual))
    mean = sum(actual) / len(actual)
    total = sum((a - mean) ** 2 for a in actual)
    return 1.0 - residual / total


def brute_ev(pred, actual):
    n = len(actual)
    residual = [a - p for p, a in zip(pred, actual)]
    residual_mean = sum(residual) / n
    actual_mean = sum(actual) / n
    var_residual = sum((r - residual_mean) ** 2 for r in residual) / n
    var_actual = sum((a - actual_mean) ** 2 for a in actual) / n
    return 1.0 - var_residual / var_actual


def brute_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = sum((a - mx) ** 2 for a in x) ** 0.5
    sy = sum((b - my) ** 2 for b in y) ** 0.5
    return cov / (sx * sy)


def average_ranks(values):
    return [sum(1 for w in values if w < v) + (sum(1 for w in values if w == v) + 1) / 2.0 for v in values]


def brute_spearman(x, y):
    return brute_pearson(average_ranks(x), average_ranks(y))


def make_expression(seed=0, genes=8, cells=4, lines=('L1',), effects=None):
    """
    Positive-valued dataset with controls and perturbations per cell line.

    ``effects`` maps perturbation -> per-gene multiplier of the control level.
    """
    rng = np.random.default_rng(seed)
    effects = effects or {
        'a': np.array([4.0, 4.0, 0.2] + [1.0] * (genes - 3)),
        'b': np.array([1.0, 0.1, 1.0, 3.0] + [1.0] * (genes - 4)),
    }
    cell_ids, cell_lines, perts, doses, rows = [], [], [], [], []
    for line in lines:
        base = rng.uniform(1.0, 2.0, size=genes)
        for name, factor in [('control', np.ones(genes))] + list(effects.items()):
            for i in range(cells):
                cell_ids.append(f'{line}_{name}_{i}')
                cell_lines.append(line)
                perts.append(name)
                doses.append(0.0 if name == 'control' else 1.0)
                rows.append(base * factor * rng.uniform(0.95, 1.05, size=genes))
    return ExpressionDataset.from_arrays([f'g{i}' for i in range(genes)], cell_ids, cell_lines, perts,
                                         doses, np.array(rows))


def control_predictions(dataset):
    """Every perturbed cell predicted as its cell line's control mean."""
    perturbed = dataset.subset(~dataset.is_control)
    values = np.empty_like(perturbed.values)
    for line in perturbed.cell_lines():
        controls = dataset.values[dataset.rows_for(perturbation='control', cell_line=line)]
        mean = controls.mean(axis=0, dtype=np.float64).astype(np.float32)
        values[perturbed.rows_for(cell_line=line)] = mean
    return ExpressionDataset(gene_ids=perturbed.gene_ids, obs=perturbed.obs, values=values)


class MetricsTestCase(SimpleTestCase):
    """
    Test the four agreement metrics against hand cases and brute-force formulas.
    """

    def test_r_squared_hand_cases(self):
        """Test R2 of 1.0, 0.0 and -0.5 on [1, 2, 3]."""
        actual = [1.0, 2.0, 3.0]
        self.assertEqual(r_squared(actual, actual), 1.0)
        self.assertEqual(r_squared([2.0, 2.0, 2.0], actual), 0.0)
        self.assertEqual(r_squared([2.0, 3.0, 4.0], actual), -0.5)

    def test_explained_variance_hand_cases(self):
        """Test that a constant shift keeps EV at 1 while R2 drops."""
        actual = [1.0, 2.0, 3.0]
        self.assertEqual(explained_variance(actual, actual), 1.0)
        self.assertEqual(explained_variance([2.0, 3.0, 4.0], actual), 1.0)
        self.assertEqual(explained_variance([2.0, 2.0, 2.0], actual), 0.0)

    def test_correlation_hand_cases(self):
        """Test perfect, inverse and tied correlations."""
        actual = [1.0, 2.0, 3.0]
        self.assertAlmostEqual(pearson(actual, actual), 1.0, places=12)
        self.assertAlmostEqual(pearson([3.0, 2.0, 1.0], actual), -1.0, places=12)
        self.assertAlmostEqual(pearson([1.0, 2.0, 4.0], actual), brute_pearson([1.0, 2.0, 4.0], actual),
                               delta=1e-12)
        self.assertAlmostEqual(spearman([1.0, 4.0, 9.0], actual), 1.0, places=12)
        self.assertAlmostEqual(spearman([9.0, 4.0, 1.0], actual), -1.0, places=12)
        self.assertAlmostEqual(spearman([1.0, 1.0, 2.0], actual), brute_spearman([1.0, 1.0, 2.0], actual),
                               delta=1e-12)

    def test_constant_inputs_are_undefined(self):
        """Test that constant vectors raise UndefinedMetricError."""
        constant = [2.0, 2.0, 2.0]
        varying = [1.0, 2.0, 3.0]
        for metric in (r_squared, explained_variance, pearson, spearman):
            with self.assertRaises(UndefinedMetricError):
                metric(varying, constant)
        for metric in (pearson, spearman):
            with self.assertRaises(UndefinedMetricError):
                metric(constant, varying)

    def test_random_pairs_match_brute_force(self):
        """Test 100 random length-50 pairs within 1e-9."""
        rng = np.random.default_rng(17)
        for _ in range(100):
            actual = rng.normal(size=50)
            pred = actual + rng.normal(scale=rng.uniform(0.1, 2.0), size=50)
            pred_list, actual_list = pred.tolist(), actual.tolist()
            self.assertAlmostEqual(r_squared(pred, actual), brute_r2(pred_list, actual_list), delta=1e-9)
            self.assertAlmostEqual(explained_variance(pred, actual), brute_ev(pred_list, actual_list), delta=1e-9)
            self.assertAlmostEqual(pearson(pred, actual), brute_pearson(pred_list, actual_list), delta=1e-9)
            self.assertAlmostEqual(spearman(pred, actual), brute_spearman(pred_list, actual_list), delta=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, 12, elements=st.floats(-100, 100)),
        arrays(np.float64, 12, elements=st.floats(-100, 100)),
        st.randoms(use_true_random=False),
    )
    def test_reordering_and_ev_bound(self, pred, actual, random):
        """Test invariance under a shared permutation and EV >= R2."""
        if np.ptp(actual) < 1e-3 or np.ptp(pred) < 1e-3:
            return
        order = list(range(12))
        random.shuffle(order)
        r2 = r_squared(pred, actual)
        self.assertTrue(math.isclose(r_squared(pred[order], actual[order]), r2, rel_tol=1e-9, abs_tol=1e-9))
        self.assertAlmostEqual(pearson(pred[order], actual[order]), pearson(pred, actual), delta=1e-9)
        self.assertAlmostEqual(spearman(pred[order], actual[order]), spearman(pred, actual), delta=1e-9)
        self.assertGreaterEqual(explained_variance(pred, actual), r2 - 1e-9 * max(1.0, abs(r2)))
        self.assertLessEqual(r2, 1.0 + 1e-12)

    def test_length_mismatch(self):
        """Test that vectors of different length are rejected."""
        with self.assertRaises(ShapeError):
            r_squared([1.0, 2.0], [1.0, 2.0, 3.0])


class DEGTestCase(SimpleTestCase):
    """
    Test differentially expressed gene selection.
    """

    def test_hand_case(self):
        """Test indices [0, 3, 2] with |lfc| [2.0, 1.32, 1.0]."""
        degs = select_degs([1.0, 1.0, 1.0, 1.0], [4.0, 1.0, 2.0, 0.4])
        self.assertEqual(degs.indices, [0, 3, 2])
        np.testing.assert_allclose(np.abs(degs.lfc), [2.0, np.log2(2.5), 1.0], atol=1e-5)

    def test_threshold_boundary(self):
        """Test that only pseudocount-sized shortfalls below the threshold pass."""
        degs = select_degs([1.0, 1.0, 1.0], [2.0, 1.999, 2.0], epsilon=1e-6)
        self.assertEqual(degs.indices, [0, 2])
        self.assertTrue(all(abs(v) >= 1.0 - DEG_THRESHOLD_TOLERANCE for v in degs.lfc))
        self.assertEqual(select_degs([1.0], [1.999], epsilon=0.0).indices, [])

    def test_no_change_gives_empty_set(self):
        """Test that pert = ctrl selects nothing."""
        degs = select_degs([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        self.assertEqual(len(degs), 0)
        self.assertFalse(degs)

    def test_truncation_to_k(self):
        """Test that k keeps the largest |lfc| genes."""
        degs = select_degs([1.0, 1.0, 1.0], [8.0, 2.0, 32.0], k=2)
        self.assertEqual(degs.indices, [2, 0])

    def test_ties_go_to_lower_index(self):
        """Test deterministic ordering of equal fold changes."""
        degs = select_degs([1.0, 1.0, 1.0], [4.0, 0.25, 4.0], epsilon=0.0)
        self.assertEqual(degs.indices, [0, 1, 2])

    def test_negative_values_are_a_domain_error(self):
        """Test that log-space or centered data is refused."""
        with self.assertRaises(DomainError):
            select_degs([1.0, -0.5], [1.0, 1.0])

    def test_linear_space(self):
        """Test that log1p-transformed data is undone with expm1."""
        np.testing.assert_allclose(linear_space(np.log1p([0.0, 3.0]), log1p_data=True), [0.0, 3.0])
        np.testing.assert_array_equal(linear_space([0.5], log1p_data=False), [0.5])

    def test_profile_table(self):
        """Test the DEG profile table columns and changes."""
        table = deg_profile_table([1.0, 1.0, 1.0], [4.0, 1.0, 0.25], [3.0, 1.0, 0.5], ['g0', 'g1', 'g2'], k=5)
        self.assertEqual(list(table.columns), list(DEG_TABLE_COLUMNS))
        self.assertEqual(list(table['gene_id']), ['g0', 'g2'])
        np.testing.assert_allclose(table['actual_change'], [3.0, -0.75])
        np.testing.assert_allclose(table['predicted_change'], [2.0, -0.5])


class EvaluateTestCase(SimpleTestCase):
    """
    Test per-condition evaluation and the report.
    """

    def setUp(self):
        self.dataset = make_expression(lines=('L1', 'L2'))
        self.perturbed = self.dataset.subset(~self.dataset.is_control)

    def test_condition_mean(self):
        """Test the elementwise mean of a condition."""
        np.testing.assert_array_equal(per_condition_mean([[1.0, 2.0]]), [1.0, 2.0])
        np.testing.assert_array_equal(per_condition_mean([[0.0, 2.0], [2.0, 0.0]]), [1.0, 1.0])
        with self.assertRaises(DataError):
            per_condition_mean(np.empty((0, 2)))

    def test_perfect_predictions(self):
        """Test that predictions equal to the actual cells score 1 on all genes."""
        report = evaluate(self.perturbed, self.dataset, k=50)
        self.assertEqual(len(report.records), 4)
        self.assertEqual([(r.cell_line, r.perturbation) for r in report.records],
                         [('L1', 'a'), ('L1', 'b'), ('L2', 'a'), ('L2', 'b')])
        for record in report.records:
            self.assertAlmostEqual(record.r2_all, 1.0, places=9)
            self.assertAlmostEqual(record.ev_all, 1.0, places=9)
            self.assertAlmostEqual(record.pcc_all, 1.0, places=9)
            self.assertAlmostEqual(record.spearman_all, 1.0, places=9)
            self.assertLess(record.baseline_r2_all, 1.0)
            self.assertGreaterEqual(record.deg_count, 2)
            self.assertLessEqual(record.deg_count, 50)
            self.assertEqual(record.n_cells, 4)

    def test_control_predictions_equal_baseline(self):
        """Test that predicting the control mean reproduces the baseline columns."""
        report = evaluate(control_predictions(self.dataset), self.dataset)
        for record in report.records:
            self.assertAlmostEqual(record.r2_all, record.baseline_r2_all, places=9)
            self.assertAlmostEqual(record.r2_deg, record.baseline_r2_deg, places=9)

    def test_empty_deg_set_is_absent(self):
        """Test that DEG columns are None, not 0, when nothing passes the threshold."""
        dataset = make_expression(effects={'mild': np.full(8, 1.2)})
        report = evaluate(dataset.subset(~dataset.is_control), dataset)
        record = report.records[0]
        self.assertEqual(record.deg_count, 0)
        self.assertIsNone(record.r2_deg)
        self.assertIsNone(record.baseline_r2_deg)
        self.assertIsNotNone(record.r2_all)
        self.assertIsNone(report.aggregates['r2_deg']['mean'])

    def test_default_synthetic_dataset(self):
        """Test that a default noisy synthetic dataset evaluates without domain errors."""
        dataset, _ = generate(SynthConfig(seed=1))
        report = evaluate(dataset.subset(~dataset.is_control), dataset)
        self.assertEqual(len(report.records), 24 * 2)
        for record in report.records:
            self.assertAlmostEqual(record.r2_all, 1.0, places=9)
            self.assertLess(record.baseline_r2_all, 1.0)

    def test_missing_control(self):
        """Test that a cell line without controls is a data error."""
        actual = self.dataset.subset(~self.dataset.is_control)
        with self.assertRaises(DataError):
            evaluate(actual, actual)

    def test_missing_predictions(self):
        """Test that an unpredicted condition is a data error."""
        predictions = self.perturbed.subset(self.perturbed.rows_for(perturbation='a'))
        with self.assertRaises(DataError):
            evaluate(predictions, self.dataset)

    def test_gene_header_mismatch(self):
        """Test that differing gene headers are a schema error."""
        renamed = ExpressionDataset(gene_ids=[f'x{i}' for i in range(8)], obs=self.perturbed.obs,
                                    values=self.perturbed.values)
        with self.assertRaises(SchemaError):
            evaluate(renamed, self.dataset)

    def test_aggregates(self):
        """Test mean/median aggregates overall and per cell line."""
        report = evaluate(control_predictions(self.dataset), self.dataset)
        values = [r.baseline_r2_all for r in report.records]
        self.assertAlmostEqual(report.aggregates['baseline_r2_all']['mean'], np.mean(values), places=12)
        self.assertAlmostEqual(report.aggregates['baseline_r2_all']['median'], np.median(values), places=12)
        self.assertEqual(sorted(report.per_cell_line), ['L1', 'L2'])
        line_values = [r.baseline_r2_all for r in report.records if r.cell_line == 'L2']
        self.assertAlmostEqual(report.per_cell_line['L2']['baseline_r2_all']['mean'], np.mean(line_values),
                               places=12)
        summary = report.summary()
        self.assertIn('median_r2_deg', summary)
        self.assertIn('mean_baseline_r2_all', summary)

    def test_report_files(self):
        """Test the JSON and CSV report formats."""
        report = evaluate(self.perturbed, self.dataset)
        with tempfile.TemporaryDirectory() as tmp:
            json_path, csv_path = report.write(tmp)
            payload = json.loads(json_path.read_text(encoding='utf-8'))
            frame = pd.read_csv(csv_path)
            raw = csv_path.read_bytes()
        self.assertEqual(set(payload), {'settings', 'records', 'aggregates', 'per_cell_line'})
        self.assertEqual(list(frame.columns), list(RECORD_COLUMNS))
        self.assertEqual(len(frame), 4)
        self.assertNotIn(b'\r\n', raw)

    def test_top_responders(self):
        """Test ranking by DEG count and the advantage columns."""
        report = evaluate(self.perturbed, self.dataset)
        top = top_responders(report, fraction=0.5)
        self.assertEqual(len(top), 2)
        counts = [r.deg_count for r in report.records]
        self.assertEqual(top['deg_count'].iloc[0], max(counts))
        np.testing.assert_allclose(top['r2_all_advantage'], top['r2_all'] - top['baseline_r2_all'])
        self.assertEqual(len(top_responders(report, fraction=0.01)), 1)
        with self.assertRaises(ConfigurationError):
            top_responders(report, fraction=0.0)

    def test_deg_tables(self):
        """Test the stacked DEG profile table of every condition."""
        table = deg_tables(self.perturbed, self.dataset, k=2)
        self.assertEqual(list(table.columns[:2]), ['cell_line', 'perturbation'])
        self.assertEqual(len(table), 8)


class EvaluateCommandTestCase(SimpleTestCase):
    """
    Test the evaluate management command.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        dataset = make_expression(lines=('L1', 'L2'))
        self.actual = self.root / 'actual.tsv'
        self.predictions = self.root / 'predictions.tsv'
        save_dataset(dataset, self.actual)
        save_dataset(dataset.subset(~dataset.is_control), self.predictions)

    def _call(self, **options):
        stdout = io.StringIO()
        call_command('evaluate', stdout=stdout, **options)
        return stdout.getvalue()

    def test_perfect_predictions_print_unit_r2(self):
        """Test the printed summary and the written files."""
        output = self.root / 'report'
        printed = self._call(predictions=str(self.predictions), actual=str(self.actual), output=str(output),
                             deg_table=3)
        self.assertIn('R2 (all): mean 1.0000', printed)
        frame = pd.read_csv(output / 'report.csv')
        self.assertIn('baseline_r2_all', frame.columns)
        self.assertIn('baseline_r2_deg', frame.columns)
        for name in ('report.json', 'top_responders.csv', 'deg_table.csv', 'resolved_config.json'):
            self.assertTrue((output / name).exists(), name)
        payload = json.loads((output / 'report.json').read_text(encoding='utf-8'))
        for column in ('r2_all', 'r2_deg'):
            self.assertLessEqual({'mean', 'median'}, set(payload['aggregates'][column]))

    def test_header_mismatch_exits_5(self):
        """Test that mismatched gene headers give exit code 5."""
        text = self.predictions.read_text(encoding='utf-8').replace('\tg0\t', '\tother\t', 1)
        self.predictions.write_text(text, encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self._call(predictions=str(self.predictions), actual=str(self.actual),
                       output=str(self.root / 'bad'))
        self.assertEqual(ctx.exception.returncode, 5)

    def test_predictions_or_checkpoint(self):
        """Test that exactly one prediction source is required."""
        with self.assertRaises(CommandError) as ctx:
            self._call(actual=str(self.actual), output=str(self.root / 'none'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_resolved_config_reruns(self):
        """Test that the resolved config alone repeats the run byte for byte."""
        first = self.root / 'first'
        self._call(predictions=str(self.predictions), actual=str(self.actual), output=str(first),
                   k=3, threshold=0.5, deg_table=2, top_fraction=0.5)
        resolved = json.loads((first / 'resolved_config.json').read_text(encoding='utf-8'))
        self.assertEqual(resolved['predictions'], str(self.predictions))
        self.assertEqual(resolved['actual'], str(self.actual))
        self.assertEqual((resolved['k'], resolved['deg_table'], resolved['top_fraction']), (3, 2, 0.5))
        second = self.root / 'second'
        self._call(config=str(first / 'resolved_config.json'), output=str(second))
        for name in ('report.json', 'report.csv', 'top_responders.csv', 'deg_table.csv', 'resolved_config.json'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_flags_override_config(self):
        """Test that a passed flag wins over the same key in --config."""
        config = self.root / 'eval.json'
        config.write_text(json.dumps({'predictions': str(self.predictions), 'actual': str(self.actual),
                                      'k': 3}), encoding='utf-8')
        output = self.root / 'override'
        self._call(config=str(config), output=str(output), k=4)
        resolved = json.loads((output / 'resolved_config.json').read_text(encoding='utf-8'))
        self.assertEqual(resolved['k'], 4)
        self.assertEqual(resolved['predictions'], str(self.predictions))

    def test_missing_actual_exits_2(self):
        """Test that --actual is required from flags or config."""
        with self.assertRaises(CommandError) as ctx:
            self._call(predictions=str(self.predictions), output=str(self.root / 'none'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('--actual', str(ctx.exception))

    def test_unknown_config_key_exits_2(self):
        """Test that an undeclared key in --config is rejected."""
        config = self.root / 'eval.json'
        config.write_text(json.dumps({'actual': str(self.actual), 'bogus': 1}), encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self._call(config=str(config), predictions=str(self.predictions), output=str(self.root / 'none'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_invalid_threshold_exits_2(self):
        """Test that flag values are validated like the eval config section."""
        with self.assertRaises(CommandError) as ctx:
            self._call(predictions=str(self.predictions), actual=str(self.actual),
                       output=str(self.root / 'neg'), threshold=-1.0)
        self.assertEqual(ctx.exception.returncode, 2)
