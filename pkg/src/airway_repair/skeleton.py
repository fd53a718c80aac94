"""Centerline extraction: 3D thinning and the skeleton graph.

Thinning is 6-subiteration directional simple-point deletion with endpoint
protection (see ``_thinning``).  A protected tip that lies inside the
inscribed ball of another skeleton voxel is a surface bump rather than a
branch end; its chain back to the junction is removed and thinning
resumes, which keeps the skeleton free of one- and two-voxel spurs.  This is
independent of the optional length-based spur filter, which stays off by
default.  The graph treats every skeleton voxel whose 26-neighbour
count differs from two as a node and every maximal chain of degree-2
voxels between nodes as an edge polyline.  Closed rings have no node on
the spanning forest and are therefore opened at one step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial import cKDTree
from skimage.measure import euler_number

from ._thinning import thin_mask
from .morphology import STRUCTURE_6, connected_components
from .unionfind import UnionFind
from .volume import BinaryMask, linear_index

ENDPOINT = "endpoint"
BRANCHPOINT = "branchpoint"
ISOLATED = "isolated"

NEIGHBOR_OFFSETS = np.array(
    [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)], dtype=np.int64
)


def skeletonize(mask: BinaryMask, min_spur_mm: float = 0.0) -> BinaryMask:
    """Thin a mask to a 1-voxel-wide, topology-equivalent skeleton.

    Terminal chains no longer than the local radius at their junction are
    thinning artifacts and are always removed.  With ``min_spur_mm > 0``,
    terminal branches shorter than that length are then trimmed once.
    """
    if not mask.data.any():
        return mask.with_data(np.zeros(mask.dims, dtype=bool))
    out = _prune_bumps(mask.with_data(thin_mask(mask.data)), mask)
    if min_spur_mm > 0:
        out = prune_spurs(out, min_spur_mm)
    return out


@dataclass(frozen=True)
class Node:
    id: int
    xyz: tuple
    kind: str
    component: int
    voxel: int  # row into SkeletonGraph.coords


@dataclass(frozen=True, eq=False)
class Edge:
    id: int
    a: int
    b: int
    polyline: np.ndarray  # (k, 3) voxel coords from node a to node b
    length_mm: float


@dataclass(eq=False)
class SkeletonGraph:
    dims: tuple
    spacing: tuple
    coords: np.ndarray  # (n, 3) skeleton voxels in linear-index order
    component: np.ndarray  # per skeleton voxel, 0-based
    neighbors: list  # per skeleton voxel, sorted rows of 26-neighbours
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    node_of_voxel: dict = field(default_factory=dict)
    edges_of_voxel: list = field(default_factory=list)  # voxel row -> [(edge id, position)]

    @property
    def n_components(self) -> int:
        return int(self.component.max()) + 1 if len(self.component) else 0

    def endpoints(self) -> list:
        """Endpoint and isolated nodes, in node-id order."""
        return [n for n in self.nodes if n.kind in (ENDPOINT, ISOLATED)]

    def degree(self, row: int) -> int:
        return len(self.neighbors[row])

    def row_of(self, xyz) -> int:
        lin = linear_index(np.asarray(xyz), self.dims)
        pos = int(np.searchsorted(self._lin, lin))
        if pos >= len(self._lin) or self._lin[pos] != lin:
            raise KeyError(f"{tuple(xyz)} is not a skeleton voxel")
        return pos

    @property
    def total_length_mm(self) -> float:
        return float(sum(e.length_mm for e in self.edges))

    def to_json(self) -> dict:
        return {
            "nodes": [
                {"id": n.id, "xyz": list(n.xyz), "kind": n.kind, "component": n.component}
                for n in self.nodes
            ],
            "edges": [
                {
                    "a": e.a,
                    "b": e.b,
                    "length_mm": e.length_mm,
                    "polyline": e.polyline.tolist(),
                }
                for e in self.edges
            ],
        }


def _neighbor_lists(coords: np.ndarray, dims) -> tuple[np.ndarray, list]:
    lin = linear_index(coords, dims)
    n = len(coords)
    dims_arr = np.asarray(dims)
    rows, cols = [], []
    for off in NEIGHBOR_OFFSETS:
        nb = coords + off
        inside = np.all((nb >= 0) & (nb < dims_arr), axis=1)
        nb_lin = linear_index(nb[inside], dims)
        pos = np.searchsorted(lin, nb_lin)
        pos = np.minimum(pos, max(n - 1, 0))
        hit = lin[pos] == nb_lin
        rows.append(np.flatnonzero(inside)[hit])
        cols.append(pos[hit])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    split = np.searchsorted(rows, np.arange(n + 1))
    neighbors = [cols[split[i] : split[i + 1]] for i in range(n)]
    return lin, neighbors


def _polyline_length(poly: np.ndarray, spacing) -> float:
    if len(poly) < 2:
        return 0.0
    steps = np.diff(poly, axis=0) * np.asarray(spacing, dtype=float)
    return float(np.sqrt((steps**2).sum(axis=1)).sum())


def _spanning_forest(coords: np.ndarray, neighbors: list, spacing) -> list:
    """Kruskal minimum spanning forest of the 26-adjacency, ties by row pair."""
    n = len(coords)
    pairs = [(i, int(j)) for i in range(n) for j in neighbors[i] if i < j]
    tree = [[] for _ in range(n)]
    if not pairs:
        return tree
    pairs = np.asarray(pairs, dtype=np.int64)
    steps = (coords[pairs[:, 0]] - coords[pairs[:, 1]]) * np.asarray(spacing, dtype=float)
    weight = (steps**2).sum(axis=1)
    order = np.lexsort((pairs[:, 1], pairs[:, 0], weight))
    uf = UnionFind(n)
    for i, j in pairs[order].tolist():
        if uf.union(i, j):
            tree[i].append(j)
            tree[j].append(i)
    return [sorted(t) for t in tree]


def build_graph(skel: BinaryMask) -> SkeletonGraph:
    """Convert skeleton voxels into nodes and polyline edges.

    Node kinds follow the raw 26-neighbour count (1: endpoint, 0: isolated,
    otherwise branchpoint).  Edges are traced over a minimum spanning forest
    of the voxel adjacency so that clusters of mutually adjacent junction
    voxels contribute no redundant diagonal steps; on a clique-free skeleton
    the forest is the full adjacency.
    """
    coords = skel.coords()
    dims = skel.dims
    spacing = tuple(skel.spacing)
    lin, neighbors = _neighbor_lists(coords, dims)
    labels = connected_components(skel).labels
    component = (labels[tuple(coords.T)] - 1).astype(np.int64) if len(coords) else np.zeros(0, np.int64)

    graph = SkeletonGraph(dims, spacing, coords, component, neighbors)
    graph._lin = lin
    graph.edges_of_voxel = [[] for _ in range(len(coords))]
    tree = _spanning_forest(coords, neighbors, spacing)

    degree = np.array([len(nb) for nb in neighbors], dtype=np.int64)
    tree_degree = np.array([len(t) for t in tree], dtype=np.int64)
    is_node = (degree != 2) | (tree_degree != 2)
    for row in np.flatnonzero(is_node):
        kind = ISOLATED if degree[row] == 0 else ENDPOINT if degree[row] == 1 else BRANCHPOINT
        _add_node(graph, int(row), kind)

    used = set()
    for node in list(graph.nodes):
        for first in tree[node.voxel]:
            if (min(node.voxel, first), max(node.voxel, first)) in used:
                continue
            path = [node.voxel, first]
            used.add((min(node.voxel, first), max(node.voxel, first)))
            prev, cur = node.voxel, first
            while not is_node[cur]:
                a, b = tree[cur]
                nxt = b if a == prev else a
                used.add((min(cur, nxt), max(cur, nxt)))
                path.append(nxt)
                prev, cur = cur, nxt
            _add_edge(graph, path)
    return graph


def _add_node(graph: SkeletonGraph, row: int, kind: str) -> None:
    node = Node(
        id=len(graph.nodes),
        xyz=tuple(int(v) for v in graph.coords[row]),
        kind=kind,
        component=int(graph.component[row]),
        voxel=row,
    )
    graph.nodes.append(node)
    graph.node_of_voxel[row] = node.id


def _add_edge(graph: SkeletonGraph, rows: list) -> None:
    poly = graph.coords[rows]
    edge = Edge(
        id=len(graph.edges),
        a=graph.node_of_voxel[rows[0]],
        b=graph.node_of_voxel[rows[-1]],
        polyline=poly,
        length_mm=_polyline_length(poly, graph.spacing),
    )
    graph.edges.append(edge)
    for pos, row in enumerate(rows):
        graph.edges_of_voxel[row].append((edge.id, pos))


def total_centerline_length(skel: BinaryMask) -> float:
    """Sum of edge lengths (mm) of the skeleton graph."""
    if not skel.data.any():
        return 0.0
    return build_graph(skel).total_length_mm


def _terminal_chains(skel: BinaryMask):
    """Yield (rows, junction, length_mm) for every tip-to-junction chain.

    The walk follows the spanning forest from a voxel with one neighbour up
    to, but excluding, the first forest voxel of degree three or more, so a
    junction made of mutually adjacent voxels counts as one junction.
    Chains that end in another tip are skipped.
    """
    coords = skel.coords()
    _, neighbors = _neighbor_lists(coords, skel.dims)
    sp = np.asarray(skel.spacing, dtype=float)
    tree = _spanning_forest(coords, neighbors, sp)
    for tip in range(len(coords)):
        if len(neighbors[tip]) != 1:
            continue
        rows, length, prev, cur = [tip], 0.0, -1, tip
        while True:
            ahead = [j for j in tree[cur] if j != prev]
            if len(ahead) != 1:
                break
            nxt = ahead[0]
            length += float(np.linalg.norm((coords[nxt] - coords[cur]) * sp))
            if len(tree[nxt]) >= 3:
                yield coords[rows], coords[nxt], length
                break
            rows.append(nxt)
            prev, cur = cur, nxt


def _prune_bumps(skel: BinaryMask, mask: BinaryMask) -> BinaryMask:
    """Drop terminal chains whose tip is covered by the rest of the skeleton.

    A tip inside the inscribed ball of some skeleton voxel outside its own
    chain adds nothing to the reconstructed shape: it is a surface bump left
    by sequential deletion rather than a branch.  Pruning and thinning
    alternate until both are stable; on an existing skeleton the radii are
    no larger than on the original mask, so a second call removes nothing.
    """
    sp = np.asarray(mask.spacing, dtype=float)
    radius = ndi.distance_transform_edt(mask.data, sampling=tuple(sp))
    while True:
        coords = skel.coords()
        pts = coords * sp
        r = radius[tuple(coords.T)]
        lookup = cKDTree(pts)
        data = skel.data.copy()
        for chain, _, _ in _terminal_chains(skel):
            own = set(linear_index(chain, skel.dims).tolist())
            tip = chain[0] * sp
            near = lookup.query_ball_point(tip, r.max())
            for j in near:
                if int(linear_index(coords[j], skel.dims)) in own:
                    continue
                if np.linalg.norm(pts[j] - tip) <= r[j]:
                    data[tuple(chain.T)] = False
                    break
        if np.array_equal(data, skel.data):
            return skel
        skel = skel.with_data(thin_mask(data))


def prune_spurs(skel: BinaryMask, min_spur_mm: float) -> BinaryMask:
    """Remove tip-to-junction chains shorter than ``min_spur_mm``, once."""
    data = skel.data.copy()
    for chain, _, length in _terminal_chains(skel):
        if length < min_spur_mm:
            data[tuple(chain.T)] = False
    return skel.with_data(data)


def cycle_rank(mask) -> int:
    """Number of independent tunnels (first Betti number) of a 26-connected object.

    Computed as components + cavities - Euler characteristic, so voxel-scale
    cliques of mutually adjacent voxels do not count as cycles.  Zero means
    the object is a forest.
    """
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    if not data.any():
        return 0
    chi = euler_number(data, connectivity=3)
    b0 = connected_components(data).count
    bg, n_bg = ndi.label(~np.pad(data, 1), structure=STRUCTURE_6)
    b2 = n_bg - 1
    return int(b0 + b2 - chi)
