"""
Tests for configuration forms, file helpers and the command base.
"""
import io
import json
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from .exceptions import (
    ConfigurationError, DataError, DomainError, FormatError, NumericError, ParseError, StorageError,
    UsageError,
)
from .forms import EvalConfigForm, ModelConfigForm, SplitConfigForm, SynthConfigForm, validate_section
from .management.base import XTransferCommand
from .utils import FNV_CHUNK, atomic_path, atomic_write_text, derive_seeds, fnv1a_64, read_json, write_json


class ValidateSectionTestCase(SimpleTestCase):
    """
    Test section validation with Django forms.
    """

    def test_initials_fill_missing_keys(self):
        """Test that an empty section resolves to the declared defaults."""
        values = validate_section(EvalConfigForm, None, 'eval')
        self.assertEqual(values, {'k': 50, 'threshold': 1.0, 'epsilon': 1e-6, 'log1p_data': False})

    def test_initials_are_not_shared(self):
        """Test that mutable defaults are copied per call."""
        first = validate_section(ModelConfigForm, {}, 'model')
        first['encoder_hidden'].append(7)
        second = validate_section(ModelConfigForm, {}, 'model')
        self.assertEqual(second['encoder_hidden'], [1024, 512, 256])

    def test_unknown_keys(self):
        """Test that undeclared keys are named in the error."""
        with self.assertRaisesRegex(ConfigurationError, 'eval: unknown keys bogus'):
            validate_section(EvalConfigForm, {'bogus': 1}, 'eval')

    def test_field_errors_are_prefixed(self):
        """Test that invalid values report their section and field."""
        with self.assertRaisesRegex(ConfigurationError, 'eval.epsilon'):
            validate_section(EvalConfigForm, {'epsilon': 0.0}, 'eval')
        with self.assertRaisesRegex(ConfigurationError, 'model.dropout_rate'):
            validate_section(ModelConfigForm, {'dropout_rate': 1.0}, 'model')

    def test_nested_loss_weights(self):
        """Test that loss weights are validated and completed."""
        values = validate_section(ModelConfigForm, {'loss_weights': {'cross': 0.5}}, 'model')
        self.assertEqual(values['loss_weights'],
                         {'sim': 1.0, 'orth': 1.0, 'reco1': 1.0, 'reco2': 1.0, 'cross': 0.5})
        with self.assertRaises(ConfigurationError):
            validate_section(ModelConfigForm, {'loss_weights': {'cross': -1.0}}, 'model')

    def test_split_rules(self):
        """Test the ratio and holdout split rules."""
        with self.assertRaisesRegex(ConfigurationError, 'holdout'):
            validate_section(SplitConfigForm, {'mode': 'holdout'}, 'split')
        with self.assertRaises(ConfigurationError):
            validate_section(SplitConfigForm, {'ratios': [0.5, 0.5]}, 'split')
        values = validate_section(SplitConfigForm, {'ratios': [8, 1, 1]}, 'split')
        self.assertEqual(values['ratios'], [8.0, 1.0, 1.0])

    def test_synth_rules(self):
        """Test the generator flag constraints."""
        with self.assertRaisesRegex(ConfigurationError, 'At least 4 perturbations'):
            validate_section(SynthConfigForm, {'perts': 3}, 'synth')
        with self.assertRaisesRegex(ConfigurationError, 'genes must be at least latent'):
            validate_section(SynthConfigForm, {'genes': 4, 'latent': 8}, 'synth')


class FileHelpersTestCase(SimpleTestCase):
    """
    Test atomic writes, JSON helpers, digests and seed derivation.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_write_json_is_canonical(self):
        """Test sorted keys, two-space indent and a trailing newline."""
        path = self.root / 'nested' / 'doc.json'
        write_json(path, {'b': 1, 'a': [1, 2]})
        text = path.read_text(encoding='utf-8')
        self.assertTrue(text.startswith('{\n  "a"'))
        self.assertTrue(text.endswith('}\n'))
        self.assertEqual(read_json(path), {'a': [1, 2], 'b': 1})

    def test_read_json_errors(self):
        """Test missing and malformed documents."""
        with self.assertRaises(StorageError):
            read_json(self.root / 'missing.json')
        broken = self.root / 'broken.json'
        broken.write_text('{not json', encoding='utf-8')
        with self.assertRaises(FormatError):
            read_json(broken)
        with self.assertRaises(ConfigurationError):
            read_json(broken, invalid=ConfigurationError)

    def test_failed_write_keeps_previous_contents(self):
        """Test that an exception inside atomic_path leaves the target untouched."""
        target = self.root / 'out.txt'
        atomic_write_text(target, 'first\n')
        with self.assertRaises(RuntimeError):
            with atomic_path(target) as tmp:
                tmp.write_text('partial', encoding='utf-8')
                raise RuntimeError('interrupted')
        self.assertEqual(target.read_text(encoding='utf-8'), 'first\n')
        self.assertEqual(sorted(p.name for p in self.root.iterdir()), ['out.txt'])

    def test_fnv1a_reference_values(self):
        """Test the published 64-bit FNV-1a values."""
        self.assertEqual(fnv1a_64(b''), 0xCBF29CE484222325)
        self.assertEqual(fnv1a_64(b'a'), 0xAF63DC4C8601EC8C)
        self.assertEqual(fnv1a_64(b'foobar'), 0x85944171F73967E8)

    def test_fnv1a_reads_buffers_in_place(self):
        """Test that arrays and byte arrays hash like their bytes, across chunk boundaries."""
        values = np.random.default_rng(0).normal(size=(300, 900)).astype('<f4')
        self.assertGreater(values.nbytes, FNV_CHUNK)
        self.assertEqual(fnv1a_64(values), fnv1a_64(values.tobytes()))
        self.assertEqual(fnv1a_64(bytearray(b'foobar')), 0x85944171F73967E8)

    def test_derive_seeds(self):
        """Test that derived seeds are stable and distinct."""
        self.assertEqual(derive_seeds(7, 3), derive_seeds(7, 3))
        self.assertEqual(len(set(derive_seeds(7, 5))), 5)
        self.assertNotEqual(derive_seeds(7, 3), derive_seeds(8, 3))


class ExceptionTestCase(SimpleTestCase):
    """
    Test the exit codes of the error families.
    """

    def test_exit_codes(self):
        """Test 2 for configuration, 3 for storage, 4 for numeric and 5 for data errors."""
        self.assertEqual(ConfigurationError.exit_code, 2)
        self.assertEqual(UsageError.exit_code, 2)
        self.assertEqual(StorageError.exit_code, 3)
        self.assertEqual(NumericError.exit_code, 4)
        self.assertEqual(DataError.exit_code, 5)
        self.assertEqual(DomainError.exit_code, 5)

    def test_parse_error_line(self):
        """Test that a parse error names its line."""
        self.assertEqual(str(ParseError('bad value', line=3)), 'line 3: bad value')
        self.assertIsNone(ParseError('bad header').line)


class CommandBaseTestCase(SimpleTestCase):
    """
    Test the shared management command behavior.
    """

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_errors_become_exit_codes(self):
        """Test that engine errors surface as CommandError with their exit code."""
        command = XTransferCommand(stdout=io.StringIO(), stderr=io.StringIO())
        for error, code in ((StorageError('disk'), 3), (NumericError('nan'), 4), (DataError('rows'), 5)):
            with mock.patch.object(XTransferCommand, 'run', side_effect=error):
                with self.assertRaises(CommandError) as ctx:
                    command.handle()
            self.assertEqual(ctx.exception.returncode, code)

    def test_invalid_config_file_exits_2(self):
        """Test that a malformed --config document is a configuration error."""
        config = self.root / 'synth.json'
        config.write_text('[1, 2]', encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            call_command('gen_synth', config=str(config), output=str(self.root / 'out'), stdout=io.StringIO())
        self.assertEqual(ctx.exception.returncode, 2)

    def test_resolved_config_location(self):
        """Test resolved-config names for directory and file outputs."""
        command = XTransferCommand()
        directory = command.write_resolved(self.root / 'run', {'k': 1})
        self.assertEqual(directory, self.root / 'run' / 'resolved_config.json')
        beside = command.write_resolved(self.root / 'predictions.tsv', {'k': 1})
        self.assertEqual(beside, self.root / 'predictions.tsv.resolved_config.json')
        self.assertEqual(json.loads(beside.read_text(encoding='utf-8')), {'k': 1})

    def test_resolved_config_reruns(self):
        """Test that the resolved config of a run can be passed back as --config."""
        first = self.root / 'first'
        call_command('gen_synth', output=str(first), genes=6, latent=2, perts=4, cells=2, cell_lines=1,
                     stdout=io.StringIO())
        second = self.root / 'second'
        call_command('gen_synth', config=str(first / 'resolved_config.json'), output=str(second),
                     stdout=io.StringIO())
        self.assertEqual((first / 'dataset.tsv').read_bytes(), (second / 'dataset.tsv').read_bytes())

    def test_format_score(self):
        self.assertEqual(XTransferCommand.format_score(None), 'n/a')
        self.assertEqual(XTransferCommand.format_score(0.123456), '0.1235')
