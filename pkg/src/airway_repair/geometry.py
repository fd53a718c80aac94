"""Integer line rasterization and skeleton walks shared by repair and profiles."""

import numpy as np


def rasterize_path(a, b) -> np.ndarray:
    """3D Bresenham line from voxel ``a`` to voxel ``b``, both ends included.

    Consecutive voxels are 26-adjacent.  The result depends only on the
    two endpoints (and their order).
    """
    p = [int(v) for v in a]
    q = [int(v) for v in b]
    d = [abs(q[k] - p[k]) for k in range(3)]
    s = [1 if q[k] > p[k] else -1 for k in range(3)]
    drive = int(np.argmax(d))  # first axis wins ties
    o1, o2 = [k for k in range(3) if k != drive]
    n = d[drive]
    e1 = 2 * d[o1] - n
    e2 = 2 * d[o2] - n
    out = [tuple(p)]
    for _ in range(n):
        if e1 > 0:
            p[o1] += s[o1]
            e1 -= 2 * n
        if e2 > 0:
            p[o2] += s[o2]
            e2 -= 2 * n
        e1 += 2 * d[o1]
        e2 += 2 * d[o2]
        p[drive] += s[drive]
        out.append(tuple(p))
    return np.asarray(out, dtype=np.int64)


def trace_skeleton(graph, row: int, direction, n: int) -> np.ndarray:
    """Walk up to ``n`` skeleton voxels away from ``row``.

    Each step goes to the unvisited 26-neighbour whose step best agrees with
    the running heading (initially ``direction``, in voxel units); ties go to
    the lower row.  The start voxel is not included.
    """
    heading = np.asarray(direction, dtype=float)
    visited = {row}
    cur = row
    out = []
    for _ in range(n):
        best, best_score = -1, -np.inf
        for nb in graph.neighbors[cur]:
            nb = int(nb)
            if nb in visited:
                continue
            step = (graph.coords[nb] - graph.coords[cur]).astype(float)
            score = step @ heading / np.linalg.norm(step)
            if score > best_score + 1e-12:
                best, best_score = nb, score
        if best < 0:
            break
        # do not re-enter a voxel adjacent to what was already walked except the current one
        visited.update(int(v) for v in graph.neighbors[cur])
        heading = 0.5 * heading / max(np.linalg.norm(heading), 1e-12) + 0.5 * (
            graph.coords[best] - graph.coords[cur]
        ) / np.linalg.norm(graph.coords[best] - graph.coords[cur])
        out.append(best)
        cur = best
    return graph.coords[out] if out else np.zeros((0, 3), dtype=np.int64)
