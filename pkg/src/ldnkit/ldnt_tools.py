"""Utilities for reading and writing the LDNT binary tensor format.

An LDNT file holds one tensor:

- 4-byte magic ``LDNT``
- u8 dtype code (1 = float32, 2 = float64)
- u8 rank
- ``rank`` little-endian u32 extents
- the elements, little-endian, row-major
"""


from typing import Union
from pathlib import Path
import logging
import struct

import numpy as np

from .exceptions import FormatError
from .tensor import DTYPE_CODES, Tensor
from .utils import readFileBytes


logger = logging.getLogger(__name__)


LDNT_MAGIC = b"LDNT"

_HEADER = struct.Struct("<4sBB")
_EXTENT = struct.Struct("<I")


def encodeTensor(tensor: Tensor) -> bytes:
    """Serializes ``tensor`` to LDNT bytes"""
    if tensor.ndim > 255:
        raise FormatError(f"LDNT supports at most 255 axes, got {tensor.ndim}")
    header = _HEADER.pack(LDNT_MAGIC, tensor.dtypeCode, tensor.ndim)
    extents = b"".join(_EXTENT.pack(extent) for extent in tensor.shape)
    payload = tensor.data.astype(tensor.dtype.newbyteorder("<"), copy=False).tobytes()
    return header + extents + payload


def decodeTensor(data: bytes) -> Tensor:
    """Parses LDNT bytes.\n
    Raises a :class:`.FormatError` on a bad magic, an unknown dtype code, a truncated payload or
    trailing bytes."""
    if len(data) < _HEADER.size:
        raise FormatError(f"Truncated LDNT header: {len(data)} bytes")
    magic, code, rank = _HEADER.unpack_from(data, 0)
    if magic != LDNT_MAGIC:
        raise FormatError(f"Bad LDNT magic {magic!r}")
    if code not in DTYPE_CODES:
        raise FormatError(f"Unknown LDNT dtype code {code}")
    offset = _HEADER.size
    if len(data) < offset + rank * _EXTENT.size:
        raise FormatError("Truncated LDNT extents")
    shape = tuple(_EXTENT.unpack_from(data, offset + i * _EXTENT.size)[0] for i in range(rank))
    offset += rank * _EXTENT.size

    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    expected = count * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(
            f"LDNT payload for shape {shape} and dtype {dtype.name} must be {expected} bytes, "
            f"got {len(data) - offset}"
        )
    array = np.frombuffer(data, dtype=dtype.newbyteorder("<"), count=count, offset=offset)
    return Tensor(array.astype(dtype).reshape(shape))


def parseTensorFile(
    filePath: Union[Path, str]
) -> Tensor:
    """Create a tensor from a stored LDNT file."""
    try:
        data = readFileBytes(filePath)
    except OSError as e:
        raise FormatError(f"Could not read tensor file {filePath}") from e
    return decodeTensor(data)


def saveTensorFile(
    filePath: Union[Path, str],
    tensor: Tensor
) -> None:
    """Save a tensor to an LDNT file."""
    if isinstance(filePath, str):
        filePath = Path(filePath)
    with open(filePath, 'wb') as file:
        file.write(encodeTensor(tensor))
    logger.debug("Tensor %s saved to: %s", tensor.shape, filePath)
