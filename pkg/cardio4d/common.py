"""Common code and utilities."""

import logging
import struct
from hashlib import blake2s
from typing import Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

#: Largest number of elements accepted in a single array read from file.
MAX_ELEMENTS = 2**31 - 1

#: Largest number of dimensions accepted in a file header.
MAX_NDIM = 8


class Cardio4DError(Exception):
    """Base class for errors raised by :mod:`cardio4d`."""

    #: Process exit status used by :mod:`.cli` when this error reaches the surface.
    exit_code: int = 1


class UsageError(Cardio4DError):
    """Invalid command-line usage."""


class ConfigError(Cardio4DError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(Cardio4DError, ValueError):
    """Tensor or array shapes do not match an operation's contract."""


class GraphError(Cardio4DError, RuntimeError):
    """Misuse of an autodiff :class:`.Tape`."""


class MetricError(Cardio4DError, ValueError):
    """A metric is undefined for its input."""


class NumericError(Cardio4DError):
    """Numeric failure, e.g. an implementation disagreement or a NaN loss."""

    exit_code = 3


class NonFiniteError(NumericError, FloatingPointError):
    """NaN or infinite values where finite values are required."""


class DataError(Cardio4DError):
    """Missing, unreadable or inconsistent data."""

    exit_code = 2


class PhantomError(DataError, ValueError):
    """Phantom geometry does not fit its grid."""


class ManifestError(DataError):
    """Invalid dataset manifest."""


class FormatError(DataError):
    """Malformed VOL4 or CKPT file."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedError(FormatError):
    """Header-declared size does not match the bytes present."""


class DimensionOverflowError(FormatError):
    """Declared dimensions are empty, too many, or too large."""


def derive_seed(base_seed: int, key: str) -> int:
    """Return a seed for the stream named `key`, derived from `base_seed`.

    The result does not depend on the order in which streams are created, so
    sequences can be generated in any order or in parallel.
    """
    digest = blake2s(f"{base_seed}:{key}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def check_dims(dims: Sequence[int]) -> Tuple[int, ...]:
    """Validate `dims` read from a file header.

    Raises
    ------
    DimensionOverflowError
        if there are no dimensions or more than :data:`MAX_NDIM`, if any extent is
        zero, or if the element count exceeds :data:`MAX_ELEMENTS`.
    """
    dims = tuple(int(d) for d in dims)
    if not 0 < len(dims) <= MAX_NDIM:
        raise DimensionOverflowError(f"{len(dims)} dimensions")
    if any(d == 0 for d in dims):
        raise DimensionOverflowError(f"zero extent in {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{dims} exceeds {MAX_ELEMENTS} elements")
    return dims


class Reader:
    """Sequential little-endian reader over a bytes buffer.

    Every read past the end of the buffer raises :class:`.TruncatedError`.
    """

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = memoryview(buf)
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buf):
            raise TruncatedError(
                f"{self.what}: need {n} bytes at offset {self.offset}, "
                f"{len(self.buf) - self.offset} available"
            )
        result = self.buf[self.offset : self.offset + n].tobytes()
        self.offset += n
        return result

    def unpack(self, fmt: str) -> tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, dims: Tuple[int, ...]) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(dims))
        data = np.frombuffer(self.take(count * dt.itemsize), dtype=dt)
        return data.astype(dt.newbyteorder("="), copy=True).reshape(dims)

    def finish(self) -> None:
        """Raise :class:`.TruncatedError` if bytes remain unread."""
        if remaining := len(self.buf) - self.offset:
            raise TruncatedError(f"{self.what}: {remaining} bytes beyond payload")
