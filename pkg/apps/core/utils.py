"""
Shared helpers: atomic file output, digests, and seed derivation.
"""
import hashlib
import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, List, Type, Union

import numpy as np

from .exceptions import FormatError, StorageError, XTransferError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
FNV_CHUNK = 1 << 20


def ensure_directory(path: PathLike) -> Path:
    """
    Create a directory (and parents) if needed.

    Args:
        path: Directory to create

    Returns:
        Path: The directory path

    Raises:
        StorageError: If the directory cannot be created
    """
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Cannot create directory {directory}: {e}") from e
    return directory


@contextmanager
def atomic_path(path: PathLike) -> Iterator[Path]:
    """
    Yield a temporary path next to ``path`` and rename it into place on success.

    Readers never observe a half-written file; on error the temporary file
    is removed and the previous contents of ``path`` survive.
    """
    target = Path(path)
    ensure_directory(target.parent)
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f'.{target.name}.', dir=target.parent)
        os.close(fd)
    except OSError as e:
        raise StorageError(f"Cannot write to {target.parent}: {e}") from e
    tmp_path = Path(tmp_name)
    try:
        yield tmp_path
        os.replace(tmp_path, target)
    except OSError as e:
        raise StorageError(f"Cannot write {target}: {e}") from e
    finally:
        if tmp_path.exists():
            tmp_path.unlink()


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write bytes to ``path`` atomically."""
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write UTF-8 text with LF endings to ``path`` atomically."""
    with atomic_path(path) as tmp:
        with open(tmp, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(text)


def write_json(path: PathLike, payload: Any) -> None:
    """Write a JSON document atomically (UTF-8, LF, sorted keys, trailing newline)."""
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def read_json(path: PathLike, invalid: Type[XTransferError] = FormatError) -> Any:
    """
    Read a JSON document.

    Raises:
        StorageError: If the file cannot be read
        invalid: If the file is not valid JSON (FormatError by default)
    """
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            return json.load(handle)
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
    except ValueError as e:
        raise invalid(f"{path} is not valid JSON: {e}") from e


def fnv1a_64(data) -> int:
    """
    64-bit FNV-1a digest of a bytes-like object.

    The hash is a serial byte loop, about 0.2 s per MB; a default-size
    checkpoint (~11 MB) costs a couple of seconds per save and per load.
    Any buffer (bytes, bytearray, a contiguous numpy array) is read in
    place through a memoryview.
    """
    view = memoryview(data).cast('B')
    digest, prime, mask = FNV64_OFFSET, FNV64_PRIME, _MASK64
    for start in range(0, len(view), FNV_CHUNK):
        for byte in view[start:start + FNV_CHUNK].tobytes():
            digest = ((digest ^ byte) * prime) & mask
    return digest


def file_sha256(path: PathLike) -> str:
    """Hex SHA-256 of a file, used to fingerprint datasets in run manifests."""
    sha = hashlib.sha256()
    try:
        with open(path, 'rb') as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b''):
                sha.update(chunk)
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
    return sha.hexdigest()


def derive_seeds(seed: int, count: int) -> List[int]:
    """
    Derive ``count`` independent integer seeds from one seed.

    The same (seed, count) always yields the same list.
    """
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]
