"""Geometry-aware volume and mask containers.

Arrays are indexed ``data[x, y, z]``.  The linear voxel index used for
deterministic ordering (labels, tie-breaks, sort keys) is x-fastest:
``x + nx * (y + ny * z)``, which is also the on-disk NIfTI payload order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import GeometryError


class Spacing(NamedTuple):
    """Voxel edge lengths in mm."""

    dx: float
    dy: float
    dz: float

    @classmethod
    def coerce(cls, value) -> "Spacing":
        if isinstance(value, Spacing):
            sp = value
        else:
            vals = tuple(float(v) for v in value)
            if len(vals) != 3:
                raise GeometryError(f"spacing needs 3 values, got {len(vals)}")
            sp = cls(*vals)
        for v in sp:
            if not (math.isfinite(v) and v > 0):
                raise GeometryError(f"spacing must be positive and finite, got {tuple(sp)}")
        return sp

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar CT volume (HU) with anisotropic spacing."""

    data: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"volume must be 3D with every dim >= 1, got shape {data.shape}")
        if data.dtype == bool:
            raise GeometryError("boolean data belongs in a BinaryMask")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", Spacing.coerce(self.spacing))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume3D":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match {self.data.shape}")
        return Volume3D(data, self.spacing, self.origin, self.header)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean voxel mask sharing a volume's geometry."""

    data: np.ndarray
    spacing: Spacing = Spacing(1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise GeometryError(f"mask must be 3D with every dim >= 1, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data.astype(bool, copy=False)))
        object.__setattr__(self, "spacing", Spacing.coerce(self.spacing))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def with_data(self, data) -> "BinaryMask":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise GeometryError(f"shape {data.shape} does not match {self.data.shape}")
        return BinaryMask(data, self.spacing, self.origin, self.header)

    def coords(self) -> np.ndarray:
        """Foreground voxel coordinates, shape (n, 3), in linear-index order."""
        return coords_in_linear_order(self.data)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing == other.spacing and bool(np.array_equal(self.data, other.data))

    __hash__ = None


def linear_index(coords, dims) -> np.ndarray | int:
    """x-fastest linear index of voxel coordinates."""
    nx, ny, _ = dims
    c = np.asarray(coords)
    idx = c[..., 0] + nx * (c[..., 1] + ny * c[..., 2])
    return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)


def unravel_index(index, dims) -> np.ndarray:
    """Inverse of :func:`linear_index`."""
    nx, ny, _ = dims
    index = np.asarray(index, dtype=np.int64)
    x = index % nx
    y = (index // nx) % ny
    z = index // (nx * ny)
    return np.stack([x, y, z], axis=-1)


def coords_in_linear_order(data: np.ndarray) -> np.ndarray:
    # Transposing to (z, y, x) makes argwhere's C-order scan x-fastest.
    zyx = np.argwhere(np.asarray(data).transpose(2, 1, 0))
    return zyx[:, ::-1].astype(np.int64)


def check_same_geometry(a, b, what="inputs"):
    """Raise GeometryError unless two volumes/masks share dims and spacing."""
    if a.dims != b.dims:
        raise GeometryError(f"{what}: dims differ {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=0):
        raise GeometryError(f"{what}: spacing differs {tuple(a.spacing)} vs {tuple(b.spacing)}")


def as_mask(obj, spacing=None) -> BinaryMask:
    """Coerce a BinaryMask or a 3D array-like into a BinaryMask."""
    if isinstance(obj, BinaryMask):
        return obj
    if isinstance(obj, Volume3D):
        return BinaryMask(obj.data != 0, obj.spacing, obj.origin, obj.header)
    return BinaryMask(np.asarray(obj), spacing if spacing is not None else Spacing(1.0, 1.0, 1.0))


def as_volume(obj, spacing=None) -> Volume3D:
    if isinstance(obj, Volume3D):
        return obj
    return Volume3D(np.asarray(obj, dtype=float), spacing if spacing is not None else Spacing(1.0, 1.0, 1.0))
