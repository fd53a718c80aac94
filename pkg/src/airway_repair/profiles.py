"""1D intensity profiles along centerline paths and three-class sample synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ContractError, FormatError, GenerationError
from .geometry import rasterize_path, trace_skeleton
from .morphology import dilate_ball
from .skeleton import build_graph, skeletonize
from .volume import check_same_geometry

PROFILE_LENGTH = 64
CONTEXT_VOXELS = 16
HU_MIN, HU_MAX = -1000.0, 400.0

CLASSES = ("true_airway", "parenchyma", "obstruction")
TRUE_AIRWAY, PARENCHYMA, OBSTRUCTION = range(3)


@dataclass(frozen=True, eq=False)
class IntensityProfile:
    samples: np.ndarray
    provenance: str = "extracted"  # or "synthesized"
    path: np.ndarray | None = None  # voxel path the samples were taken along


def normalize_hu(hu):
    hu = np.clip(np.asarray(hu, dtype=float), HU_MIN, HU_MAX)
    return (hu - HU_MIN) / (HU_MAX - HU_MIN)


def resample_polyline(points, spacing, n: int) -> np.ndarray:
    """``n`` points spaced uniformly in mm arc length along a voxel polyline."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 1:
        return np.repeat(pts, n, axis=0)
    seg = np.linalg.norm(np.diff(pts, axis=0) * np.asarray(spacing, dtype=float), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(t, arc, pts[:, k]) for k in range(3)], axis=1)


def sample_volume(volume, points) -> np.ndarray:
    """Trilinear HU at continuous voxel coordinates.

    Written as nested lerps ``a + f * (b - a)`` so a constant region
    reproduces its value exactly.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    hi = np.asarray(volume.dims) - 1
    if np.any(pts < -1e-9) or np.any(pts > hi + 1e-9):
        raise BoundsError("sampling path leaves the volume")
    pts = np.clip(pts, 0, hi)
    i0 = np.minimum(np.floor(pts).astype(np.int64), np.maximum(hi - 1, 0))
    i1 = np.minimum(i0 + 1, hi)
    f = pts - i0
    pick = (i0, i1)

    def at(a, b, c):
        return volume.data[pick[a][:, 0], pick[b][:, 1], pick[c][:, 2]].astype(float)

    def lerp(lo, up, t):
        return lo + t * (up - lo)

    along_z = {(a, b): lerp(at(a, b, 0), at(a, b, 1), f[:, 2]) for a in (0, 1) for b in (0, 1)}
    along_y = [lerp(along_z[a, 0], along_z[a, 1], f[:, 1]) for a in (0, 1)]
    return lerp(along_y[0], along_y[1], f[:, 0])


def extract_profile(volume, path, context_voxels=CONTEXT_VOXELS, before=None, after=None, length=PROFILE_LENGTH):
    """Normalized HU profile along ``before[::-1] + path + after``.

    ``before`` lists skeleton voxels leading away from ``path[0]`` and
    ``after`` those leading away from ``path[-1]``; at most
    ``context_voxels`` of each are used.
    """
    path = np.asarray(path, dtype=np.int64).reshape(-1, 3)
    if len(path) == 0:
        raise ContractError("profile path is empty")
    parts = []
    if before is not None and len(before) and context_voxels > 0:
        parts.append(np.asarray(before, dtype=np.int64)[:context_voxels][::-1])
    parts.append(path)
    if after is not None and len(after) and context_voxels > 0:
        parts.append(np.asarray(after, dtype=np.int64)[:context_voxels])
    full = np.concatenate(parts)
    pts = resample_polyline(full, volume.spacing, length)
    return IntensityProfile(normalize_hu(sample_volume(volume, pts)), "extracted", full)


def obstruct(samples, rng, lo=0.2, hi=0.6, hu_mean=0.0, hu_sd=50.0) -> np.ndarray:
    """Overwrite a contiguous 20-60% window with soft-tissue-like values."""
    out = np.array(samples, dtype=float, copy=True)
    n = len(out)
    w = int(rng.integers(int(np.ceil(lo * n)), int(np.floor(hi * n)) + 1))
    start = int(rng.integers(0, n - w + 1))
    out[start : start + w] = normalize_hu(rng.normal(hu_mean, hu_sd, size=w))
    return out


def _airway_path(graph, rng, lo, hi):
    row = int(rng.integers(len(graph.coords)))
    n = int(rng.integers(lo, hi + 1))
    heading = rng.normal(size=3)
    walk = trace_skeleton(graph, row, heading, n - 1)
    return np.concatenate([graph.coords[row : row + 1], walk])


def synthesize_training_set(
    gt_mask,
    volume,
    per_class: int,
    seed=0,
    length=PROFILE_LENGTH,
    path_voxels=(24, 48),
    clearance_mm=3.0,
    max_tries=200,
    return_paths=False,
):
    """Labelled profiles, ``per_class`` of each class, in class order.

    Row ``i`` of the obstruction block is the true_airway row ``i`` with a
    window replaced by dense values, so the two blocks pair up.  Returns
    ``(X, y)`` with X of shape (3 * per_class, length), plus the voxel path
    of every row when ``return_paths`` is set.
    """
    check_same_geometry(gt_mask, volume, "gt_mask/volume")
    rng = np.random.default_rng(seed)
    graph = build_graph(skeletonize(gt_mask))
    if len(graph.coords) == 0:
        raise GenerationError("true_airway: ground-truth skeleton is empty")
    lo, hi = path_voxels

    airway = np.empty((per_class, length))
    paths = []
    min_len = max(2, lo // 2)
    for i in range(per_class):
        for _ in range(max_tries):
            path = _airway_path(graph, rng, lo, hi)
            if len(path) >= min_len:
                break
        else:
            raise GenerationError(f"true_airway: no skeleton path of {min_len}+ voxels")
        airway[i] = extract_profile(volume, path, 0, length=length).samples
        paths.append(path)

    keepout = dilate_ball(gt_mask, clearance_mm).data
    dims = np.asarray(volume.dims)
    sp = np.asarray(volume.spacing, dtype=float)
    paren = np.empty((per_class, length))
    for i in range(per_class):
        for _ in range(max_tries):
            a = rng.uniform(0, dims - 1)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            span = rng.uniform(lo, hi) * sp.min()
            b = a + d * span / sp
            if np.any(b < 0) or np.any(b > dims - 1):
                continue
            path = rasterize_path(np.rint(a), np.rint(b))
            if not keepout[tuple(path.T)].any():
                break
        else:
            raise GenerationError(f"parenchyma: no straight segment clear of the airway after {max_tries} tries")
        paren[i] = extract_profile(volume, path, 0, length=length).samples
        paths.append(path)

    obstr = np.stack([obstruct(p, rng) for p in airway]) if per_class else np.empty((0, length))
    X = np.concatenate([airway, paren, obstr])
    y = np.repeat(np.arange(3, dtype=np.int64), per_class)
    if return_paths:
        return X, y, paths + paths[:per_class]
    return X, y


def save_profiles(path, X, y) -> None:
    """Flat records of ``L`` little-endian float32 samples plus one label byte."""
    X = np.asarray(X, dtype="<f4")
    y = np.asarray(y, dtype=np.uint8)
    rec = np.dtype([("x", "<f4", (X.shape[1],)), ("y", "u1")])
    out = np.empty(len(X), dtype=rec)
    out["x"] = X
    out["y"] = y
    out.tofile(path)


def load_profiles(path, length=PROFILE_LENGTH):
    rec = np.dtype([("x", "<f4", (length,)), ("y", "u1")])
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec.itemsize:
        raise FormatError(f"profile file size {raw.size} is not a multiple of {rec.itemsize}-byte records")
    data = raw.view(rec)
    return data["x"].astype(np.float64), data["y"].astype(np.int64)
