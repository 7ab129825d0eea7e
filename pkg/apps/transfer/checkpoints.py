"""
Checkpoint directories.

A checkpoint is ``manifest.json`` plus ``params.bin``. The binary file is
every tensor concatenated as little-endian float32 in row-major order; the
manifest records the format version, the model configuration, one table
entry per tensor (name, shape, dtype, byte offset, byte length) and a
64-bit FNV-1a digest of ``params.bin``.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from django.conf import settings

from apps.core.exceptions import ConfigurationError, FormatError, ShapeError, StorageError
from apps.core.utils import PathLike, atomic_write_bytes, ensure_directory, fnv1a_64, read_json, write_json

from .config import ModelConfig
from .model import ModelParams

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
PARAMS_NAME = 'params.bin'
TENSOR_DTYPE = 'f32'
_LE_F32 = np.dtype('<f4')


def format_version() -> int:
    return settings.XTRANSFER['CHECKPOINT_FORMAT_VERSION']


def _digest_hex(data: bytes) -> str:
    return f'{fnv1a_64(data):016x}'


def save_checkpoint(params: ModelParams, path: PathLike, extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write ``params`` and their configuration to the checkpoint directory ``path``.

    ``params.bin`` is written before the manifest, so a directory with a
    readable manifest always has matching parameters.
    """
    directory = ensure_directory(path)
    table = []
    chunks = []
    offset = 0
    for name, value in params.flat().items():
        data = np.ascontiguousarray(value, dtype=_LE_F32).tobytes(order='C')
        table.append({
            'name': name,
            'shape': list(value.shape),
            'dtype': TENSOR_DTYPE,
            'offset': offset,
            'length': len(data),
        })
        chunks.append(data)
        offset += len(data)
    blob = b''.join(chunks)
    atomic_write_bytes(directory / PARAMS_NAME, blob)

    manifest = {
        'format_version': format_version(),
        'config': params.config.to_dict(),
        'tensors': table,
        'params_bytes': len(blob),
        'fnv1a64': _digest_hex(blob),
    }
    if extra:
        manifest['extra'] = extra
    write_json(directory / MANIFEST_NAME, manifest)
    logger.info("Saved checkpoint %s (%d tensors, %d bytes)", directory, len(table), len(blob))
    return directory


def read_manifest(path: PathLike) -> Dict[str, Any]:
    """
    Raises:
        FormatError: If the manifest is missing, unparseable or incomplete
    """
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"No checkpoint manifest at {manifest_path}")
    try:
        manifest = read_json(manifest_path)
    except StorageError as e:
        raise FormatError(str(e)) from e
    if not isinstance(manifest, dict):
        raise FormatError(f"{manifest_path} is not a JSON object")
    missing = [key for key in ('format_version', 'config', 'tensors', 'params_bytes', 'fnv1a64')
               if key not in manifest]
    if missing:
        raise FormatError(f"{manifest_path} lacks {', '.join(missing)}")
    if manifest['format_version'] != format_version():
        raise FormatError(
            f"Checkpoint format {manifest['format_version']} is not supported (expected {format_version()})"
        )
    return manifest


def load_checkpoint(path: PathLike) -> Tuple[ModelParams, ModelConfig]:
    """
    Read a checkpoint directory; the round trip is bit-exact.

    Raises:
        FormatError: If the manifest or parameters are missing, corrupt,
            or inconsistent with each other or with the configuration
    """
    directory = Path(path)
    manifest = read_manifest(directory)
    try:
        config = ModelConfig.from_dict(manifest['config'])
    except ConfigurationError as e:
        raise FormatError(f"Checkpoint configuration is invalid: {e}") from e

    params_path = directory / PARAMS_NAME
    try:
        blob = params_path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read {params_path}: {e}") from e
    if len(blob) != manifest['params_bytes']:
        raise FormatError(
            f"{params_path} holds {len(blob)} bytes, manifest expects {manifest['params_bytes']}"
        )
    if _digest_hex(blob) != manifest['fnv1a64']:
        raise FormatError(f"{params_path} does not match the manifest digest")

    tensors = {}
    for entry in manifest['tensors']:
        try:
            name, shape = entry['name'], tuple(int(s) for s in entry['shape'])
            offset, length = int(entry['offset']), int(entry['length'])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"Malformed tensor entry {entry!r}") from e
        if entry.get('dtype') != TENSOR_DTYPE:
            raise FormatError(f"Tensor {name} has unsupported dtype {entry.get('dtype')!r}")
        if length != int(np.prod(shape)) * _LE_F32.itemsize or offset < 0 or offset + length > len(blob):
            raise FormatError(f"Tensor {name} does not fit its table entry")
        values = np.frombuffer(blob, dtype=_LE_F32, count=length // _LE_F32.itemsize, offset=offset)
        tensors[name] = values.reshape(shape).astype(np.float32)

    try:
        params = ModelParams.from_flat(config, tensors)
    except ShapeError as e:
        raise FormatError(str(e)) from e
    expected = params.expected_shapes()
    actual = {name: value.shape for name, value in tensors.items()}
    if actual != expected:
        raise FormatError("Checkpoint tensors do not match the architecture in its configuration")
    logger.info("Loaded checkpoint %s", directory)
    return params, config


def check_gene_dim(config: ModelConfig, gene_count: int) -> None:
    """
    Raises:
        ShapeError: If a dataset's gene count differs from the model's gene_dim
    """
    if config.gene_dim != gene_count:
        raise ShapeError(f"Checkpoint gene_dim {config.gene_dim} does not match dataset with {gene_count} genes")
