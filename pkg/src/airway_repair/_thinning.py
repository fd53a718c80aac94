"""Directional 3D thinning kernel (26-connected foreground, 6-connected background).

Each pass visits the six face directions in turn.  For a direction, the
border points that are simple and not endpoints are collected from the
current image; they are then deleted in raster order, each deletion
re-verifying simplicity and the endpoint condition against the updated
image.  The direction order alternates axes so that no axis is thinned
twice in a row from the same side.
"""

import itertools

import numpy as np
from numba import njit

_OFFS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)  # 27, centre at 13


def _adjacency(max_l1):
    adj = np.full((27, 26), -1, dtype=np.int64)
    for i in range(27):
        k = 0
        for j in range(27):
            if i == j or i == 13 or j == 13:
                continue
            d = np.abs(_OFFS[i] - _OFFS[j])
            if d.max() == 1 and d.sum() <= max_l1:
                adj[i, k] = j
                k += 1
    return adj


_ADJ26 = _adjacency(3)
_ADJ6 = _adjacency(1)
_IN_N18 = np.array([np.abs(o).sum() <= 2 for o in _OFFS])
_IS_N6 = np.array([np.abs(o).sum() == 1 for o in _OFFS])

# direction order: -y, +x, +z, +y, -x, -z
DIRECTIONS = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1], [0, 1, 0], [-1, 0, 0], [0, 0, -1]], dtype=np.int64)


@njit(cache=True)
def _gather(img, x, y, z, out):
    nx, ny, nz = img.shape
    n = 0
    for i in range(27):
        a = x + _OFFS[i, 0]
        b = y + _OFFS[i, 1]
        c = z + _OFFS[i, 2]
        v = False
        if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
            v = img[a, b, c]
        out[i] = v
        if v and i != 13:
            n += 1
    return n


@njit(cache=True)
def _count_components(nb, want, adj, allowed, seeds_only, stack, seen):
    """Components of positions with nb == want (restricted to ``allowed``).

    When ``seeds_only`` is given, only components containing a seed count.
    """
    for i in range(27):
        seen[i] = False
    count = 0
    for s in range(27):
        if s == 13 or seen[s] or nb[s] != want or not allowed[s]:
            continue
        if not seeds_only[s]:
            continue
        count += 1
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            cur = stack[top]
            top -= 1
            for k in range(26):
                j = adj[cur, k]
                if j < 0:
                    break
                if not seen[j] and nb[j] == want and allowed[j]:
                    seen[j] = True
                    top += 1
                    stack[top] = j
    return count


@njit(cache=True)
def _is_simple(nb, stack, seen, all27, in_n18, is_n6):
    if _count_components(nb, True, _ADJ26, all27, all27, stack, seen) != 1:
        return False
    return _count_components(nb, False, _ADJ6, in_n18, is_n6, stack, seen) == 1


@njit(cache=True)
def thin(img, directions, in_n18, is_n6):
    """Thin ``img`` (bool, modified in place) to a fixpoint."""
    nb = np.zeros(27, dtype=np.bool_)
    stack = np.zeros(32, dtype=np.int64)
    seen = np.zeros(27, dtype=np.bool_)
    all27 = np.ones(27, dtype=np.bool_)
    nx, ny, nz = img.shape
    pts = np.argwhere(img)
    # raster order with x fastest
    keys = pts[:, 0] + nx * (pts[:, 1] + ny * pts[:, 2])
    pts = pts[np.argsort(keys, kind="mergesort")]
    cand = np.zeros(pts.shape[0], dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for d in range(6):
            dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
            nc = 0
            for i in range(pts.shape[0]):
                x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
                if not img[x, y, z]:
                    continue
                a, b, c = x + dx, y + dy, z + dz
                if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and img[a, b, c]:
                    continue
                if _gather(img, x, y, z, nb) <= 1:
                    continue
                if _is_simple(nb, stack, seen, all27, in_n18, is_n6):
                    cand[nc] = i
                    nc += 1
            for k in range(nc):
                i = cand[k]
                x, y, z = pts[i, 0], pts[i, 1], pts[i, 2]
                n = _gather(img, x, y, z, nb)
                if n <= 1:
                    continue
                if _is_simple(nb, stack, seen, all27, in_n18, is_n6):
                    img[x, y, z] = False
                    changed = True
        if changed:
            keep = np.zeros(pts.shape[0], dtype=np.bool_)
            for i in range(pts.shape[0]):
                keep[i] = img[pts[i, 0], pts[i, 1], pts[i, 2]]
            pts = pts[keep]
    return img


def thin_mask(data: np.ndarray) -> np.ndarray:
    img = np.array(data, dtype=np.bool_, copy=True)
    if not img.any():
        return img
    return thin(img, DIRECTIONS, _IN_N18, _IS_N6)
