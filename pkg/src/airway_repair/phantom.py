"""Synthetic branching-tube airway phantoms with injectable discontinuities."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import ContractError, GenerationError
from .morphology import component_count
from .skeleton import cycle_rank
from .volume import BinaryMask, Spacing, Volume3D

CLEAN_GAP = "clean_gap"
OBSTRUCTION = "obstruction"

_CROSS = ndi.generate_binary_structure(3, 1)


@dataclass
class PhantomSpec:
    generations: int = 4
    root_radius_mm: float = 3.0
    radius_decay: float = 0.7
    branch_angle_deg: float = 35.0
    branch_length_mm: tuple = (26.0, 20.0, 16.0, 12.0)
    dims: tuple = (80, 80, 90)
    spacing: tuple = (1.0, 1.0, 1.0)
    lumen_hu: float = -950.0
    wall_hu: float = 0.0
    background_hu: float = -850.0
    wall_thickness_mm: float = 1.0
    azimuth_jitter_deg: float = 20.0
    length_jitter: float = 0.1
    noise_sd_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.generations) < 1:
            raise ContractError("generations must be >= 1")
        if not self.root_radius_mm > 0 or not self.radius_decay > 0:
            raise ContractError("radii must be positive")
        if len(self.branch_length_mm) < 1 or min(self.branch_length_mm) <= 0:
            raise ContractError("branch_length_mm needs positive entries")
        self.generations = int(self.generations)
        self.branch_length_mm = tuple(float(v) for v in self.branch_length_mm)
        self.dims = tuple(int(v) for v in self.dims)
        self.spacing = tuple(Spacing.coerce(self.spacing))

    def length_for(self, generation: int) -> float:
        sched = self.branch_length_mm
        if generation < len(sched):
            return sched[generation]
        return sched[-1] * 0.75 ** (generation - len(sched) + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class Branch:
    id: int
    parent: int  # -1 for the root
    generation: int
    start_mm: tuple
    end_mm: tuple
    radius_mm: float

    @property
    def length_mm(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end_mm, self.start_mm)))

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.end_mm, self.start_mm)
        return d / np.linalg.norm(d)


@dataclass(frozen=True)
class Break:
    branch_id: int
    center_fraction: float
    gap_voxels: int
    kind: str = CLEAN_GAP

    def __post_init__(self):
        if not 0.0 < self.center_fraction < 1.0:
            raise ContractError(f"center_fraction must lie in (0, 1), got {self.center_fraction}")
        if self.gap_voxels < 1:
            raise ContractError("gap_voxels must be >= 1")
        if self.kind not in (CLEAN_GAP, OBSTRUCTION):
            raise ContractError(f"unknown break kind {self.kind!r}")


@dataclass(eq=False)
class Phantom:
    volume: Volume3D
    gt_mask: BinaryMask
    branches: list = field(default_factory=list)

    @property
    def analytic_length_mm(self) -> float:
        return float(sum(b.length_mm for b in self.branches))

    def branch_table(self) -> list:
        return [asdict(b) for b in self.branches]


def _perpendicular(d: np.ndarray) -> np.ndarray:
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    return u / np.linalg.norm(u)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    # Rodrigues rotation
    axis = axis / np.linalg.norm(axis)
    return (
        v * np.cos(angle)
        + np.cross(axis, v) * np.sin(angle)
        + axis * np.dot(axis, v) * (1 - np.cos(angle))
    )


def _segments_clear(layout, clearance: float) -> bool:
    """True when no two unrelated branches come closer than their radii allow."""
    samples = np.linspace(0.0, 1.0, 33)[:, None]
    for i, (bi, pi, _, si, ei, ri) in enumerate(layout):
        pts = si + samples * (ei - si)
        for bj, pj, _, sj, ej, rj in layout[i + 1 :]:
            if pj == bi or pi == bj or pi == pj:
                continue  # parent/child or siblings share a joint
            if _segment_distance(pts, sj, ej).min() <= ri + rj + clearance:
                return False
    return True


def _layout(spec: PhantomSpec, rng: np.random.Generator, attempts: int = 50) -> list:
    """Draw branch axes until no unrelated branches collide."""
    clearance = 2 * spec.wall_thickness_mm + 2 * max(spec.spacing)
    for _ in range(attempts):
        layout = _draw_layout(spec, rng)
        if _segments_clear(layout, clearance):
            return layout
    raise GenerationError(f"no collision-free layout after {attempts} draws")


def _draw_layout(spec: PhantomSpec, rng: np.random.Generator) -> list:
    """Branch axes in a local frame; root starts at the origin heading -z."""
    branches = []
    half_angle = np.deg2rad(spec.branch_angle_deg)
    root_dir = np.array([0.0, 0.0, -1.0])
    stack = [(-1, 0, np.zeros(3), root_dir, _perpendicular(root_dir))]
    while stack:
        parent, gen, start, direction, ref = stack.pop(0)
        length = spec.length_for(gen) * (1 + spec.length_jitter * rng.uniform(-1, 1))
        end = start + direction * length
        radius = spec.root_radius_mm * spec.radius_decay**gen
        bid = len(branches)
        branches.append((bid, parent, gen, start, end, radius))
        if gen + 1 >= spec.generations:
            continue
        # split plane alternates by 90 degrees per generation, plus jitter
        azimuth = np.pi / 2 + np.deg2rad(spec.azimuth_jitter_deg) * rng.uniform(-1, 1)
        plane = _rotate(ref, direction, azimuth)
        plane -= direction * np.dot(plane, direction)
        plane /= np.linalg.norm(plane)
        for sign in (1.0, -1.0):
            child = np.cos(half_angle) * direction + sign * np.sin(half_angle) * plane
            child /= np.linalg.norm(child)
            stack.append((bid, gen + 1, end, child, plane))
    return branches


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.linalg.norm(points - closest, axis=-1)


def generate(spec: PhantomSpec, attempts: int = 20) -> Phantom:
    """Render a binary-branching tube tree into a CT-like volume.

    A layout whose digitised lumen is not a single tunnel-free component is
    redrawn from the same generator stream.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(attempts):
        lumen, wall, branches = _render(spec, _layout(spec, rng))
        if component_count(lumen) == 1 and cycle_rank(lumen) == 0:
            break
    else:
        raise GenerationError(f"no tree-shaped lumen after {attempts} layouts")
    hu = np.full(spec.dims, spec.background_hu, dtype=np.float64)
    hu[wall] = spec.wall_hu
    hu[lumen] = spec.lumen_hu
    if spec.noise_sd_hu > 0:
        hu += rng.normal(0.0, spec.noise_sd_hu, size=hu.shape)
    volume = Volume3D(hu, spec.spacing)
    return Phantom(volume, BinaryMask(lumen, spec.spacing), branches)


def _render(spec: PhantomSpec, layout: list):
    sp = np.asarray(spec.spacing)
    dims = np.asarray(spec.dims)
    outer = spec.wall_thickness_mm

    lo = np.min([np.minimum(s, e) - r - outer for _, _, _, s, e, r in layout], axis=0)
    hi = np.max([np.maximum(s, e) + r + outer for _, _, _, s, e, r in layout], axis=0)
    extent = (dims - 1) * sp
    # centre the tree; one background voxel is kept on every side
    shift = (extent - (hi - lo)) / 2 - lo
    if np.any(hi - lo > extent - 2 * sp):
        raise GenerationError(
            f"tree extent {np.round(hi - lo, 1).tolist()} mm exceeds volume {np.round(extent, 1).tolist()} mm"
        )
    shift = np.round(shift / sp) * sp

    lumen = np.zeros(spec.dims, dtype=bool)
    wall = np.zeros(spec.dims, dtype=bool)
    branches = []
    for bid, parent, gen, s, e, r in layout:
        s, e = s + shift, e + shift
        branches.append(Branch(bid, parent, gen, tuple(s.tolist()), tuple(e.tolist()), float(r)))
        reach = r + outer
        bl = np.maximum(np.floor((np.minimum(s, e) - reach) / sp).astype(int), 0)
        bh = np.minimum(np.ceil((np.maximum(s, e) + reach) / sp).astype(int) + 1, dims)
        grid = np.stack(
            np.meshgrid(*[np.arange(bl[k], bh[k]) * sp[k] for k in range(3)], indexing="ij"), axis=-1
        )
        dist = _segment_distance(grid, s, e)
        box = tuple(slice(bl[k], bh[k]) for k in range(3))
        lumen[box] |= dist <= r
        wall[box] |= dist <= reach
        if parent >= 0:
            # round off the crotch so diverging thin children do not enclose a tunnel
            ball = np.linalg.norm(grid - s, axis=-1)
            lumen[box] |= ball <= layout[parent][5]
    # thin tubes digitise with pinholes that a 6-connected background reads as tunnels
    lumen |= ndi.binary_closing(lumen, structure=_CROSS) & wall
    return lumen, wall, branches


def _slab(phantom_branch: Branch, brk: Break, branches: list, dims, spacing):
    sp = np.asarray(spacing)
    s, e = np.asarray(phantom_branch.start_mm), np.asarray(phantom_branch.end_mm)
    d = phantom_branch.direction
    length = phantom_branch.length_mm
    half = brk.gap_voxels * sp.min() / 2
    center = brk.center_fraction * length
    r = phantom_branch.radius_mm
    parent_r = branches[phantom_branch.parent].radius_mm if phantom_branch.parent >= 0 else 0.0
    lo_margin = parent_r + 1.0 if phantom_branch.parent >= 0 else 0.0
    children = [b for b in branches if b.parent == phantom_branch.id]
    hi_margin = r + 1.0 if children else 0.0
    if center - half < lo_margin or center + half > length - hi_margin:
        raise ContractError(
            f"slab outside branch {phantom_branch.id}: [{center - half:.2f}, {center + half:.2f}] mm "
            f"not within [{lo_margin:.2f}, {length - hi_margin:.2f}]"
        )
    reach = r + sp.max()
    p0, p1 = s + d * (center - half), s + d * (center + half)
    bl = np.maximum(np.floor((np.minimum(p0, p1) - reach) / sp).astype(int), 0)
    bh = np.minimum(np.ceil((np.maximum(p0, p1) + reach) / sp).astype(int) + 1, np.asarray(dims))
    grid = np.stack(np.meshgrid(*[np.arange(bl[k], bh[k]) * sp[k] for k in range(3)], indexing="ij"), axis=-1)
    rel = grid - s
    t = rel @ d
    radial = np.linalg.norm(rel - t[..., None] * d, axis=-1)
    inside = (t >= center - half) & (t < center + half) & (radial <= reach)
    out = np.zeros(dims, dtype=bool)
    out[tuple(slice(bl[k], bh[k]) for k in range(3))] = inside
    return out


def inject_breaks(gt_mask: BinaryMask, volume: Volume3D, breaks, branches, seed: int = 0):
    """Cut slabs out of the mask; obstruction breaks also raise the slab HU.

    Returns ``(broken_mask, modified_volume)``.
    """
    rng = np.random.default_rng(seed)
    mask = gt_mask.data.copy()
    hu = volume.data.astype(np.float64, copy=True)
    by_id = {b.id: b for b in branches}
    for brk in breaks:
        if brk.branch_id not in by_id:
            raise ContractError(f"unknown branch id {brk.branch_id}")
        slab = _slab(by_id[brk.branch_id], brk, branches, gt_mask.dims, gt_mask.spacing) & gt_mask.data
        mask &= ~slab
        if brk.kind == OBSTRUCTION:
            hu[slab] = rng.normal(0.0, 50.0, size=int(slab.sum()))
    if not breaks:
        return gt_mask, volume
    return gt_mask.with_data(mask), volume.with_data(hu)


def breaks_from_dicts(items) -> list:
    return [Break(int(d["branch_id"]), float(d["center_fraction"]), int(d["gap_voxels"]), d.get("kind", CLEAN_GAP)) for d in items]


def load_config(path):
    """Read a phantom JSON config: PhantomSpec fields plus optional ``breaks``."""
    with open(path) as fh:
        cfg = json.load(fh)
    return PhantomSpec.from_dict(cfg), breaks_from_dicts(cfg.get("breaks", []))
