"""Various generic utilities."""

from typing import Any, Dict, Iterator, Mapping, Optional, Type, TypeVar, Union
import contextlib
import dataclasses
import hashlib
import logging
import os
import tempfile
from pathlib import Path

from threadpoolctl import threadpool_limits

from .exceptions import ConfigError


logger = logging.getLogger(__name__)


T = TypeVar("T")


#: Bytes in one mebibyte, the unit of every memory report.
MEBIBYTE = 1024 * 1024


def isPowerOfTwo(value: int) -> bool:
    """Returns whether ``value`` is a positive power of two"""
    return value > 0 and value & (value - 1) == 0


def roundHalfUp(value: float) -> int:
    """Rounds ``value`` to the nearest integer, ties away from zero for positive values.\n
    Python's built-in ``round()`` rounds ties to even, which makes partitions depend on parity."""
    return int(value + 0.5)


def readFileBytes(
    filePath: Union[Path, str]
) -> bytes:
    """Opens stored file and returns it a string of bytes."""
    if isinstance(filePath, str):
        filePath = Path(filePath)
    with open(filePath, 'rb') as fileObject:
        rawBytes = fileObject.read()
    return rawBytes


def sha256Hex(data: bytes) -> str:
    """Returns the hexadecimal SHA-256 digest of ``data``"""
    return hashlib.sha256(data).hexdigest()


@contextlib.contextmanager
def atomicOutput(filePath: Union[Path, str]) -> Iterator[Path]:
    """Yields a temporary path next to ``filePath`` and moves it into place on success.\n
    If the body raises, the temporary file is removed and ``filePath`` is left untouched."""
    filePath = Path(filePath)
    filePath.parent.mkdir(parents=True, exist_ok=True)
    handle, tempName = tempfile.mkstemp(prefix=f".{filePath.name}.", dir=filePath.parent)
    os.close(handle)
    tempPath = Path(tempName)
    try:
        yield tempPath
        os.replace(tempPath, filePath)
    except BaseException:
        tempPath.unlink(missing_ok=True)
        raise


@contextlib.contextmanager
def limitThreads(threads: Optional[int]) -> Iterator[None]:
    """Bounds the thread pools of the numerical libraries to ``threads`` workers.\n
    ``None`` leaves the pools alone. With ``threads=1`` every reduction runs in a fixed order, which
    makes results bitwise reproducible."""
    if threads is None:
        yield
        return
    if threads < 1:
        raise ValueError(f"Thread count must be positive, got {threads}")
    logger.debug("Limiting numerical thread pools to %i thread(s)", threads)
    with threadpool_limits(limits=threads):
        yield


def dataclassFromDict(cls: Type[T], data: Mapping[str, Any], section: str) -> T:
    """Constructs dataclass ``cls`` from the JSON object ``data``.\n
    Keys must be field names of ``cls``; missing keys keep their defaults. Raises a
    :class:`.ConfigError` naming ``section`` on unknown keys or a non-object value."""
    if not isinstance(data, Mapping):
        raise ConfigError(f"Section {section!r} must be a JSON object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown fields in {section!r}: {', '.join(unknown)}")
    return cls(**data)


def dataclassToDict(instance: Any) -> Dict[str, Any]:
    """Inverse of :func:`dataclassFromDict`"""
    return dataclasses.asdict(instance)
