"""Dense tensor value type, shape arithmetic, and convolution output sizing.

Tensors are immutable: the wrapped array is copied on construction and
marked read-only, so instances can be shared freely across threads.
Values are 64-bit floats by default; 32-bit is accepted so thawed models
can run at their storage precision.

Image tensors follow one convention throughout the engine: row-major
(height, width, channels), last dimension fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CountMismatchError,
    IndivisibleStrideError,
    NonFiniteValueError,
    NonPositiveOutputError,
)

_ALLOWED_DTYPES = (np.dtype(np.float64), np.dtype(np.float32))


@dataclass(frozen=True)
class Shape:
    """Ordered tuple of positive integer extents."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) == 0:
            raise ValueError("shape needs at least one extent")
        for d in dims:
            if d < 1:
                raise ValueError(f"extents must be >= 1, got {dims}")

    @property
    def count(self) -> int:
        return math.prod(self.dims)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @classmethod
    def coerce(cls, value) -> "Shape":
        if isinstance(value, Shape):
            return value
        if isinstance(value, int):
            return cls((value,))
        return cls(tuple(value))

    def __iter__(self):
        return iter(self.dims)

    def __str__(self):
        return "x".join(str(d) for d in self.dims)


class Tensor:
    """Immutable dense array of 64-bit (or 32-bit) floats."""

    __slots__ = ("_array",)

    def __init__(self, values, dtype=None):
        arr = np.array(values, dtype=dtype, copy=True)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise NonFiniteValueError("tensor values must be finite")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def zeros(cls, shape, dtype=np.float64) -> "Tensor":
        return cls(np.zeros(Shape.coerce(shape).dims, dtype=dtype))

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the underlying data."""
        return self._array

    @property
    def shape(self) -> Shape:
        return Shape(self._array.shape)

    @property
    def dims(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def dtype(self):
        return self._array.dtype

    @property
    def size(self) -> int:
        return self._array.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._array, dtype=dtype)

    def tolist(self):
        return self._array.tolist()

    def item(self) -> float:
        return float(self._array.reshape(-1)[0])

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self._array.shape == other._array.shape
                and self._array.dtype == other._array.dtype
                and np.array_equal(self._array, other._array))

    def __hash__(self):
        return hash((self._array.shape, self._array.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self._array.dtype})"


@dataclass(frozen=True)
class ConvGeometry:
    """Convolution hyperparameters: filter count K, square filter extent F,
    stride S in pixels, symmetric zero-padding P."""

    k: int
    f: int
    s: int = 1
    p: int = 0

    def __post_init__(self):
        if self.k < 1 or self.f < 1 or self.s < 1 or self.p < 0:
            raise ValueError(
                f"need K>=1, F>=1, S>=1, P>=0; got K={self.k} F={self.f} "
                f"S={self.s} P={self.p}")


def _out_extent(extent: int, geom: ConvGeometry, axis: str) -> int:
    span = extent - geom.f + 2 * geom.p
    if span < 0:
        raise NonPositiveOutputError(
            f"{axis}: filter {geom.f} exceeds padded input {extent + 2 * geom.p}")
    if span % geom.s != 0:
        raise IndivisibleStrideError(
            f"{axis}: stride {geom.s} does not divide {extent} - {geom.f} "
            f"+ 2*{geom.p} = {span}")
    return span // geom.s + 1


def conv_out_dims(in_w: int, in_h: int, geom: ConvGeometry) -> tuple[int, int]:
    """Output spatial extents of a convolution: (W - F + 2P)/S + 1 per axis.

    Indivisible strides are an error, not a floor; output depth is K.
    """
    out_w = _out_extent(in_w, geom, "width")
    out_h = _out_extent(in_h, geom, "height")
    return out_w, out_h


def reshape(t: Tensor, new_shape) -> Tensor:
    """Same data sequence under a new shape."""
    target = Shape.coerce(new_shape)
    if target.count != t.size:
        raise CountMismatchError(
            f"cannot reshape {t.size} elements into {target} ({target.count})")
    return Tensor(t.array.reshape(target.dims), dtype=t.dtype)


def flatten(t: Tensor) -> Tensor:
    """Rank-1 tensor with the same element order."""
    return Tensor(t.array.reshape(-1), dtype=t.dtype)
