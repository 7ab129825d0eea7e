"""
Shared base for XTransferCDR management commands.

Engine errors are reported through Django's CommandError with the exit
code of their family, so ``manage.py`` exits with 2 (configuration),
3 (I/O), 4 (numeric) or 5 (data).
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from apps.core.exceptions import ConfigurationError, UsageError, XTransferError
from apps.core.utils import PathLike, read_json, write_json

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = 'resolved_config.json'


class XTransferCommand(BaseCommand):
    """
    Base command: subclasses implement ``run(**options)`` instead of ``handle``.

    ``accepts_config`` and ``accepts_seed`` switch on the global
    ``--config`` and ``--seed`` flags; ``-o`` is always available.
    """

    accepts_config = False
    accepts_seed = False
    output_help = 'Output directory'

    def add_arguments(self, parser):
        parser.add_argument('-o', '--output', default=None, help=self.output_help)
        if self.accepts_config:
            parser.add_argument('--config', default=None, help='Path to a JSON configuration file')
        if self.accepts_seed:
            parser.add_argument('--seed', type=int, default=None, help='Override every seed of the run')

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except XTransferError as e:
            logger.error("%s failed: %s", self.command_name(), e)
            raise CommandError(f"{type(e).__name__}: {e}", returncode=e.exit_code) from e

    def run(self, **options) -> None:
        raise NotImplementedError('subclasses of XTransferCommand must provide a run() method')

    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def output_dir(self, options: Dict[str, Any]) -> Path:
        return Path(options.get('output') or settings.XTRANSFER['OUTPUT_DIR'])

    def load_config(self, options: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Raw JSON document named by ``--config``, or None."""
        path = options.get('config')
        if not path:
            return None
        config = read_json(path, invalid=ConfigurationError)
        if not isinstance(config, dict):
            raise ConfigurationError(f"{path} must hold a JSON object")
        return config

    def resolve_options(self, options: Dict[str, Any], defaults: Mapping[str, Any],
                        required: Iterable[str] = (),
                        config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Command inputs from ``--config`` with explicitly passed flags on top.

        ``defaults`` names every accepted key with its fallback; a flag left
        at None defers to the config file, then to the default. ``config``
        replaces the ``--config`` document when the caller has already
        split it.
        """
        raw = (self.load_config(options) or {}) if config is None else config
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigurationError(f"{self.command_name()}: unknown keys {', '.join(unknown)}")
        resolved = {**defaults, **raw}
        for key in defaults:
            if options.get(key) is not None:
                resolved[key] = options[key]
        missing = [key for key in required if resolved.get(key) in (None, '')]
        if missing:
            flags = ', '.join('--' + key.replace('_', '-') for key in missing)
            raise UsageError(f"Missing required options: {flags}")
        return {key: str(value) if isinstance(value, Path) else value for key, value in resolved.items()}

    def write_resolved(self, output: PathLike, payload: Dict[str, Any]) -> Path:
        """
        Write the resolved options of this invocation next to its outputs.

        The payload is written as given, so it can be passed back through
        ``--config`` to repeat the run.

        A directory output gets ``resolved_config.json``; a file output
        gets ``<file name>.resolved_config.json`` beside it.
        """
        output = Path(output)
        if output.suffix:
            target = output.parent / f'{output.name}.{RESOLVED_CONFIG_NAME}'
        else:
            target = output / RESOLVED_CONFIG_NAME
        write_json(target, payload)
        return target

    def success(self, message: str) -> None:
        self.stdout.write(self.style.SUCCESS(message))

    @staticmethod
    def format_score(value) -> str:
        return 'n/a' if value is None else f'{value:.4f}'
