"""
Tests for dataset IO, drug-level splits and paired samples.
"""
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from apps.core.exceptions import ConfigurationError, DataError, ParseError, SchemaError

from .dataset import (
    ExpressionDataset, combo_label, filter_dose, load_dataset, save_dataset,
)
from .pairing import PairedSample, batch_pairs, build_pairs, control_profile, stack_pairs
from .strategies import SplitStrategyFactory, drug_level_split, holdout_split

HEADER = 'cell_id\tcell_line\tperturbation\tdose\tg1\tg2\n'


def stack_datasets(datasets):
    """Rows of several datasets sharing one gene list, in order."""
    return ExpressionDataset(
        gene_ids=datasets[0].gene_ids,
        obs=pd.concat([d.obs for d in datasets], ignore_index=True),
        values=np.concatenate([d.values for d in datasets], axis=0),
    )


def make_dataset(drug_rows, cell_lines=('L1',), controls=2, genes=3, seed=0):
    """
    Build a small dataset.

    Args:
        drug_rows: Mapping drug name -> rows per cell line
        cell_lines: Cell lines to populate
        controls: Control rows per cell line
    """
    rng = np.random.default_rng(seed)
    cell_ids, lines, perts, doses = [], [], [], []
    for line in cell_lines:
        entries = [('control', controls)] + list(drug_rows.items())
        for name, count in entries:
            for i in range(count):
                cell_ids.append(f'{line}-{name}-{i}')
                lines.append(line)
                perts.append(name)
                doses.append(0.0 if name == 'control' else 1.0)
    values = rng.normal(size=(len(cell_ids), genes))
    return ExpressionDataset.from_arrays(
        [f'g{i}' for i in range(genes)], cell_ids, lines, perts, doses, values,
    )


def write_text(directory, name, text):
    path = Path(directory) / name
    path.write_text(text, encoding='utf-8')
    return path


class LoadDatasetTestCase(SimpleTestCase):
    """
    Test parsing and writing dataset TSV files.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_three_rows_two_genes(self):
        """Test that a 3-row, 2-gene TSV parses with G inferred from the header."""
        path = write_text(self.tmp.name, 'd.tsv', HEADER +
                          'c1\tL1\tcontrol\t0\t1\t2\n'
                          'c2\tL1\tdrugA\t1\t3\t4\n'
                          'c3\tL1\tdrugB\t1\t5e-1\t6\n')
        dataset = load_dataset(path)
        self.assertEqual(dataset.n_genes, 2)
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.gene_ids, ['g1', 'g2'])
        np.testing.assert_array_equal(dataset.values[2], np.array([0.5, 6.0], dtype=np.float32))
        self.assertEqual(dataset.perturbations(), ['drugA', 'drugB'])

    def test_short_row_names_the_line(self):
        """Test that a row with G-1 values raises a parse error naming its line."""
        path = write_text(self.tmp.name, 'd.tsv', HEADER +
                          'c1\tL1\tcontrol\t0\t1\t2\n'
                          'c2\tL1\tdrugA\t1\t3\n')
        with self.assertRaises(ParseError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn('line 3', str(ctx.exception))

    def test_non_numeric_value(self):
        """Test that a non-numeric expression value is a parse error."""
        path = write_text(self.tmp.name, 'd.tsv', HEADER +
                          'c1\tL1\tcontrol\t0\t1\tabc\n')
        with self.assertRaises(ParseError) as ctx:
            load_dataset(path)
        self.assertEqual(ctx.exception.line, 2)

    def test_duplicate_gene_ids(self):
        """Test that duplicate gene columns are a schema error."""
        path = write_text(self.tmp.name, 'd.tsv',
                          'cell_id\tcell_line\tperturbation\tdose\tg1\tg1\n'
                          'c1\tL1\tcontrol\t0\t1\t2\n')
        with self.assertRaises(SchemaError):
            load_dataset(path)

    def test_dual_labels_are_canonical(self):
        """Test that dual perturbation names are sorted on load."""
        path = write_text(self.tmp.name, 'd.tsv', HEADER +
                          'c1\tL1\tzeta+alpha\t1\t1\t2\n')
        self.assertEqual(load_dataset(path).perturbations(), ['alpha+zeta'])
        self.assertEqual(combo_label('b', 'a'), 'a+b')

    def test_log1p_ingestion(self):
        """Test that the log1p flag transforms values at load time."""
        path = write_text(self.tmp.name, 'd.tsv', HEADER + 'c1\tL1\tcontrol\t0\t0\t1\n')
        dataset = load_dataset(path, log1p=True)
        np.testing.assert_allclose(dataset.values[0], [0.0, np.log(2.0)], rtol=1e-6)

    def test_save_load_round_trip(self):
        """Test that save then load preserves rows, gene order and values."""
        dataset = make_dataset({'d1': 3, 'd2': 2}, cell_lines=('L1', 'L2'), genes=5)
        path = Path(self.tmp.name) / 'out' / 'round.tsv'
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        self.assertEqual(loaded.gene_ids, dataset.gene_ids)
        self.assertEqual(len(loaded), len(dataset))
        np.testing.assert_array_equal(loaded.values, dataset.values)
        self.assertEqual(list(loaded.obs['cell_id']), list(dataset.obs['cell_id']))
        self.assertNotIn(b'\r\n', path.read_bytes())

    def test_filter_dose_keeps_controls(self):
        """Test that dose filtering keeps control rows."""
        dataset = make_dataset({'d1': 2})
        dataset.obs.loc[dataset.obs.index[-1], 'dose'] = 10.0
        filtered = filter_dose(dataset, 1.0)
        self.assertEqual(len(filtered), len(dataset) - 1)
        self.assertEqual(int(filtered.is_control.sum()), 2)


class SplitTestCase(SimpleTestCase):
    """
    Test drug-level and holdout splits.
    """

    def setUp(self):
        self.drugs = {f'd{i:02d}': 3 for i in range(10)}
        self.dataset = make_dataset(self.drugs, cell_lines=('L1', 'L2'))

    def test_ratio_counts(self):
        """Test that 10 drugs with (0.8, 0.1, 0.1) give 8/1/1."""
        result = drug_level_split(self.dataset, (0.8, 0.1, 0.1), seed=3)
        self.assertEqual(result.summary(), {'train': 8, 'val': 1, 'test': 1})

    def test_rows_follow_their_drug(self):
        """Test that every row of a drug lands in its assigned split only."""
        result = drug_level_split(self.dataset, (0.6, 0.2, 0.2), seed=5)
        for name in ('train', 'val', 'test'):
            part = result.part(name)
            for drug in part.perturbations():
                self.assertEqual(result.drug_assignment[drug], name)
                self.assertEqual(len(part.rows_for(drug)), 6)

    def test_controls_replicated(self):
        """Test that every split carries all control rows."""
        result = drug_level_split(self.dataset, (0.8, 0.1, 0.1), seed=1)
        for name in ('train', 'val', 'test'):
            self.assertEqual(int(result.part(name).is_control.sum()), 4)

    def test_same_seed_same_assignment(self):
        """Test split determinism for a fixed seed."""
        first = drug_level_split(self.dataset, (0.8, 0.1, 0.1), seed=11)
        second = drug_level_split(self.dataset, (0.8, 0.1, 0.1), seed=11)
        self.assertEqual(first.drug_assignment, second.drug_assignment)

    def test_too_few_drugs(self):
        """Test that fewer than 3 perturbations is a configuration error."""
        with self.assertRaises(ConfigurationError):
            drug_level_split(make_dataset({'a': 1, 'b': 1}), (0.8, 0.1, 0.1), seed=0)

    def test_ratios_must_sum_to_one(self):
        """Test ratio validation."""
        with self.assertRaises(ConfigurationError):
            drug_level_split(self.dataset, (0.8, 0.1, 0.2), seed=0)

    def test_holdout_exact_test_set(self):
        """Test that holdout names form exactly the test set."""
        result = holdout_split(self.dataset, ['d03', 'd07'], 0.25, seed=2)
        self.assertEqual(result.drugs_in('test'), ['d03', 'd07'])
        self.assertEqual(len(result.drugs_in('val')), 2)
        self.assertEqual(len(result.drugs_in('train')), 6)

    def test_holdout_val_fraction_arithmetic(self):
        """Test that val_fraction 0.2 over 20 remaining drugs gives 4 val drugs."""
        dataset = make_dataset({f'x{i:02d}': 1 for i in range(21)})
        result = holdout_split(dataset, ['x00'], 0.2, seed=0)
        self.assertEqual(len(result.drugs_in('val')), 4)
        self.assertEqual(len(result.drugs_in('train')), 16)

    def test_holdout_rejects_empty_and_unknown(self):
        """Test holdout guards."""
        with self.assertRaises(ConfigurationError):
            holdout_split(self.dataset, [], 0.2, seed=0)
        with self.assertRaises(ConfigurationError):
            holdout_split(self.dataset, ['nope'], 0.2, seed=0)

    def test_factory_lists_strategies(self):
        """Test the split strategy registry."""
        self.assertEqual(SplitStrategyFactory.get_available_strategies(), ['ratio', 'holdout'])
        with self.assertRaises(ConfigurationError):
            SplitStrategyFactory.create_strategy('random')


class PairingTestCase(SimpleTestCase):
    """
    Test control profiles, pair construction and batching.
    """

    def test_control_profile_mean(self):
        """Test that the control profile is the mean of control rows."""
        dataset = ExpressionDataset.from_arrays(
            ['g0', 'g1'], ['a', 'b', 'c'], ['L', 'L', 'L'],
            ['control', 'control', 'd'], [0, 0, 1], [[1, 2], [3, 4], [9, 9]],
        )
        np.testing.assert_array_equal(control_profile(dataset, 'L'), [2.0, 3.0])

    def test_single_control_row(self):
        """Test that a single control row is its own profile."""
        dataset = make_dataset({'d': 1}, controls=1)
        np.testing.assert_array_equal(control_profile(dataset, 'L1'), dataset.values[0])

    def test_unknown_cell_line(self):
        """Test that a cell line without controls is a data error."""
        with self.assertRaises(DataError):
            control_profile(make_dataset({'d': 1}), 'missing')

    def test_zip_and_drop(self):
        """Test that groups of 2 and 3 rows give 2 pairs."""
        dataset = make_dataset({'d1': 2, 'd2': 3})
        result = build_pairs(dataset, seed=4)
        self.assertEqual(len(result), 2)
        self.assertEqual(sorted(result.group_rows['L1']), [2, 3])
        for pair in result.pairs:
            self.assertEqual({pair.pert_a, pair.pert_b}, {'d1', 'd2'})

    def test_groups_do_not_mix(self):
        """Test that every pair joins a group-A drug with a group-B drug."""
        result = build_pairs(make_dataset({f'd{i}': 5 for i in range(1, 5)}), seed=9)
        side_a = {pair.pert_a for pair in result.pairs}
        side_b = {pair.pert_b for pair in result.pairs}
        self.assertEqual(len(side_a), 2)
        self.assertEqual(len(side_b), 2)
        self.assertFalse(side_a & side_b)

    def test_pairs_are_deterministic(self):
        """Test that a fixed seed gives an identical pair list."""
        dataset = make_dataset({f'd{i}': 4 for i in range(5)}, cell_lines=('L1', 'L2'))
        first = build_pairs(dataset, seed=3).pairs
        second = build_pairs(dataset, seed=3).pairs
        self.assertEqual([(p.pert_a, p.pert_b, p.x_a.tobytes()) for p in first],
                         [(p.pert_a, p.pert_b, p.x_a.tobytes()) for p in second])

    def test_pair_carries_control_profile(self):
        """Test that pairs carry their cell line's mean control profile."""
        dataset = make_dataset({'d1': 2, 'd2': 2}, cell_lines=('L1', 'L2'))
        for pair in build_pairs(dataset, seed=0).pairs:
            np.testing.assert_array_equal(pair.x_control, control_profile(dataset, pair.cell_line))

    def test_single_drug_cell_line_skipped(self):
        """Test that a cell line with one perturbation is skipped and counted."""
        both = make_dataset({'d1': 2, 'd2': 2}, cell_lines=('L1',))
        lonely = make_dataset({'d1': 2}, cell_lines=('L2',))
        result = build_pairs(stack_datasets([both, lonely]), seed=0)
        self.assertEqual(result.skipped_cell_lines, ['L2'])
        self.assertTrue(all(pair.cell_line == 'L1' for pair in result.pairs))

    def test_same_perturbation_pair_rejected(self):
        """Test that a pair of identical perturbations is invalid."""
        row = np.zeros(2, dtype=np.float32)
        with self.assertRaises(DataError):
            PairedSample(row, row, row, 'd', 'd', 'L')

    def _pairs(self, count):
        dataset = make_dataset({'d1': count, 'd2': count})
        return build_pairs(dataset, seed=0).pairs

    def test_batches_of_four(self):
        """Test that 10 pairs in batches of 4 give 4, 4, 2."""
        batches = batch_pairs(self._pairs(10), 4, seed=0, epoch=0)
        self.assertEqual([len(b) for b in batches], [4, 4, 2])

    def test_short_tail_is_merged(self):
        """Test that 9 pairs in batches of 8 give one batch of 9."""
        batches = batch_pairs(self._pairs(9), 8, seed=0, epoch=0)
        self.assertEqual([len(b) for b in batches], [9])

    def test_epoch_reshuffles(self):
        """Test that another epoch gives another order of the same pairs."""
        pairs = self._pairs(10)
        first = [id(p) for batch in batch_pairs(pairs, 4, seed=1, epoch=0) for p in batch]
        second = [id(p) for batch in batch_pairs(pairs, 4, seed=1, epoch=1) for p in batch]
        self.assertNotEqual(first, second)
        self.assertEqual(Counter(first), Counter(second))

    def test_batch_size_guard(self):
        """Test that batch_size < 2 is rejected."""
        with self.assertRaises(ConfigurationError):
            batch_pairs(self._pairs(4), 1, seed=0, epoch=0)

    def test_stack_pairs_shapes(self):
        """Test stacking a batch into matrices."""
        stacked = stack_pairs(self._pairs(3))
        self.assertEqual(stacked.x_a.shape, (3, 3))
        self.assertEqual(stacked.x_control.shape, (3, 3))


class ProtocolInvariantTestCase(SimpleTestCase):
    """
    Property tests over random split and pairing runs.
    """

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=2 ** 32 - 1),
        n_drugs=st.integers(min_value=3, max_value=12),
        n_lines=st.integers(min_value=1, max_value=3),
        rows=st.integers(min_value=1, max_value=4),
    )
    def test_split_and_pair_invariants(self, seed, n_drugs, n_lines, rows):
        """Test that drugs never span splits and pairs respect their groups."""
        dataset = make_dataset(
            {f'd{i}': rows + (i % 3) for i in range(n_drugs)},
            cell_lines=[f'L{i}' for i in range(n_lines)],
            genes=2, seed=seed % 1000,
        )
        result = drug_level_split(dataset, (0.6, 0.2, 0.2), seed=seed)
        seen = {}
        for name in ('train', 'val', 'test'):
            for drug in result.part(name).perturbations():
                self.assertNotIn(drug, seen)
                seen[drug] = name
        self.assertEqual(set(seen), set(dataset.perturbations()))

        pairing = build_pairs(result.train, seed=seed)
        per_line = Counter(pair.cell_line for pair in pairing.pairs)
        for pair in pairing.pairs:
            self.assertNotEqual(pair.pert_a, pair.pert_b)
            np.testing.assert_array_equal(pair.x_control, control_profile(result.train, pair.cell_line))
        for line, (size_a, size_b) in pairing.group_rows.items():
            self.assertEqual(per_line[line], min(size_a, size_b))
