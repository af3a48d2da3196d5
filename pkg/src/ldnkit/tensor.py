"""Provides the :class:`.Tensor` class, the value type of every kernel"""

from __future__ import annotations

from typing import Iterable, Tuple, Union
from math import prod

import numpy as np
from numpy.typing import ArrayLike, DTypeLike

from .exceptions import DTypeError, ShapeError
from .utils import sha256Hex


#: Element types a :class:`.Tensor` may hold, keyed by their LDNT dtype code.
DTYPE_CODES = {
    1: np.dtype(np.float32),
    2: np.dtype(np.float64),
}

#: Inverse of :data:`DTYPE_CODES`.
CODE_OF_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

#: The training dtype. Double precision only exists for gradient checking.
DEFAULT_DTYPE = np.dtype(np.float32)


class Tensor:
    """A dense N-dimensional array of IEEE-754 single or double precision numbers.\n
    Activations use the extent order (batch, channels, height, width).\n
    A Tensor never changes after creation: its storage is a read-only, C-contiguous numpy array.
    When it wraps a writable array (such as a parameter buffer) it holds a read-only *view*, so the
    owner of the buffer can still update it between steps."""

    __slots__ = ("_data",)

    def __init__(self, data: ArrayLike, dtype: DTypeLike = None) -> None:
        """Wraps ``data``, converting it to ``dtype`` if one is given.\n
        Arrays that are already contiguous and of the right type are not copied."""
        array = np.ascontiguousarray(data, dtype=dtype)
        if array.dtype not in CODE_OF_DTYPE:
            raise DTypeError(f"Unsupported tensor dtype {array.dtype}; expected float32 or float64")
        view = array.view()
        view.flags.writeable = False
        self._data = view

    @staticmethod
    def zeros(shape: Iterable[int], dtype: DTypeLike = DEFAULT_DTYPE) -> Tensor:
        """Returns a zero-filled tensor"""
        return Tensor(np.zeros(tuple(shape), dtype=dtype))

    @staticmethod
    def full(shape: Iterable[int], value: float, dtype: DTypeLike = DEFAULT_DTYPE) -> Tensor:
        """Returns a tensor with every element set to ``value``"""
        return Tensor(np.full(tuple(shape), value, dtype=dtype))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying storage"""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents of every axis"""
        return self._data.shape

    @property
    def ndim(self) -> int:
        """Number of axes"""
        return self._data.ndim

    @property
    def dtype(self) -> np.dtype:
        """Element type"""
        return self._data.dtype

    @property
    def dtypeCode(self) -> int:
        """LDNT code of the element type (1 = float32, 2 = float64)"""
        return CODE_OF_DTYPE[self._data.dtype]

    @property
    def numel(self) -> int:
        """Number of elements"""
        return prod(self._data.shape)

    @property
    def byteSize(self) -> int:
        """Exact storage size: element count times element width, without padding"""
        return self.numel * self._data.dtype.itemsize

    @property
    def channels(self) -> int:
        """Channel extent of an activation tensor"""
        self.requireRank(4)
        return self._data.shape[1]

    def numpy(self) -> np.ndarray:
        """Returns a writable copy of the contents"""
        return self._data.copy()

    def astype(self, dtype: DTypeLike) -> Tensor:
        """Returns the tensor converted to ``dtype``"""
        return Tensor(self._data, dtype=dtype)

    def requireRank(self, rank: int) -> None:
        """Raises a :class:`.ShapeError` unless the tensor has ``rank`` axes"""
        if self._data.ndim != rank:
            raise ShapeError(f"Expected a rank-{rank} tensor, got shape {self.shape}")

    def checksum(self) -> str:
        """SHA-256 over dtype, shape and little-endian contents"""
        header = f"{self.dtype.str}:{self.shape}".encode()
        payload = self._data.astype(self.dtype.newbyteorder("<"), copy=False).tobytes()
        return sha256Hex(header + payload)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


TensorLike = Union[Tensor, np.ndarray]


def asTensor(value: TensorLike) -> Tensor:
    """Returns ``value`` as a :class:`.Tensor`, wrapping numpy arrays without copying them"""
    return value if isinstance(value, Tensor) else Tensor(value)
