"""Binary morphology on masks: labeling, dilation, distance transform, boundaries.

Foreground connectivity is 26, background connectivity is 6.  The volume
border is treated as background for the distance transform and boundary
extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import ContractError
from .volume import BinaryMask, coords_in_linear_order

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)
STRUCTURE_6 = ndi.generate_binary_structure(3, 1)


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    """Per-voxel component labels (0 = background) and component sizes.

    ``sizes[k]`` is the voxel count of label ``k + 1``.  Labels are numbered
    in order of each component's first voxel in x-fastest scan order.
    """

    labels: np.ndarray
    count: int
    sizes: np.ndarray


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Distance in mm from each voxel to the nearest background voxel centre."""

    data: np.ndarray
    spacing: tuple

    def __getitem__(self, idx):
        return self.data[idx]


def _mask_array(mask) -> np.ndarray:
    return mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def connected_components(mask) -> ComponentLabeling:
    data = _mask_array(mask)
    raw, count = ndi.label(data, structure=STRUCTURE_26)
    if count == 0:
        return ComponentLabeling(raw.astype(np.int32), 0, np.zeros(0, dtype=np.int64))
    # renumber by first voxel in x-fastest order; scipy scans z-fastest
    flat = raw.ravel(order="F")
    present, first = np.unique(flat, return_index=True)
    keep = present > 0  # drop background, which may be absent
    present, first = present[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[present[order]] = np.arange(1, count + 1, dtype=np.int32)
    labels = remap[raw]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:].astype(np.int64)
    return ComponentLabeling(labels, int(count), sizes)


def component_count(mask) -> int:
    return connected_components(mask).count


def largest_component(mask: BinaryMask) -> BinaryMask:
    """Keep only the component with the most voxels.

    Ties go to the component whose first voxel has the smallest linear
    index.  An empty mask is returned unchanged.
    """
    lab = connected_components(mask)
    if lab.count == 0:
        return mask
    keep = int(np.argmax(lab.sizes)) + 1
    return mask.with_data(lab.labels == keep)


def ball_offsets(radius_mm: float, spacing) -> np.ndarray:
    """Integer voxel offsets within ``radius_mm`` under anisotropic spacing."""
    sp = np.asarray(spacing, dtype=float)
    reach = np.floor(radius_mm / sp + 1e-9).astype(int)
    axes = [np.arange(-r, r + 1) for r in reach]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = ((grid * sp) ** 2).sum(axis=1)
    return grid[d2 <= radius_mm * radius_mm]


def ball_footprint(radius_mm: float, spacing) -> np.ndarray:
    offs = ball_offsets(radius_mm, spacing)
    reach = np.abs(offs).max(axis=0)
    fp = np.zeros(tuple(2 * reach + 1), dtype=bool)
    fp[tuple((offs + reach).T)] = True
    return fp


def dilate_ball(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Set every voxel within ``radius_mm`` (mm-space) of a foreground voxel."""
    if not radius_mm > 0:
        raise ContractError(f"radius_mm must be positive, got {radius_mm}")
    fp = ball_footprint(radius_mm, mask.spacing)
    if fp.size == 1 or not mask.data.any():
        return mask
    return mask.with_data(ndi.binary_dilation(mask.data, structure=fp))


def distance_transform(mask) -> DistanceField:
    """Exact anisotropic Euclidean distance to the nearest background voxel.

    Voxels just outside the volume count as background.
    """
    data = _mask_array(mask)
    spacing = tuple(mask.spacing) if isinstance(mask, BinaryMask) else (1.0, 1.0, 1.0)
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    dist = ndi.distance_transform_edt(padded, sampling=spacing)
    return DistanceField(dist[1:-1, 1:-1, 1:-1], spacing)


def boundary_mask(mask) -> np.ndarray:
    data = _mask_array(mask)
    interior = ndi.binary_erosion(data, structure=STRUCTURE_6, border_value=0)
    return data & ~interior


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour, shape (n, 3)."""
    return coords_in_linear_order(boundary_mask(mask))
