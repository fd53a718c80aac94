"""Skeleton-endpoint reconnection of broken airway masks.

Pipeline: skeletonize, build the centerline graph, list candidate links
from every endpoint to nearby skeleton voxels, select links greedily so
that no cycle is formed, optionally keep only links whose intensity
profile reads as true airway, then draw each kept link as a straight voxel
line dilated to the local lumen radius.  Only the stretch of a link
between the two components is drawn, and a tube that would still close a
loop is drawn as a bare voxel line, or dropped.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ContractError
from .geometry import rasterize_path, trace_skeleton
from .morphology import ball_offsets, component_count, connected_components, distance_transform
from .profiles import CLASSES, CONTEXT_VOXELS, extract_profile
from .skeleton import ENDPOINT, ISOLATED, SkeletonGraph, build_graph, cycle_rank, skeletonize
from .unionfind import UnionFind
from .volume import BinaryMask, as_mask, as_volume, check_same_geometry, linear_index

__all__ = [
    "RepairConfig",
    "CandidateConnection",
    "RepairReport",
    "endpoint_tangent",
    "find_candidates",
    "select_connections",
    "rasterize_path",
    "connection_radius",
    "repair_mask",
    "DiscontinuityRepairer",
]

GATE_ON = "on"
GATE_OFF = "off-accept-all"
UNCLASSIFIED = "unclassified"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RepairConfig:
    search_radius_mm: float = 10.0
    max_bend_deg: float = 60.0
    tangent_window_voxels: int = 5
    min_gap_voxels: int = 1
    classifier_gate: str = GATE_ON
    context_voxels: int = CONTEXT_VOXELS
    min_spur_mm: float = 0.0

    def __post_init__(self):
        if not self.search_radius_mm > 0:
            raise ContractError(f"search_radius_mm must be > 0, got {self.search_radius_mm}")
        if not 0 < self.max_bend_deg <= 180:
            raise ContractError(f"max_bend_deg must lie in (0, 180], got {self.max_bend_deg}")
        if int(self.tangent_window_voxels) < 2:
            raise ContractError("tangent_window_voxels must be >= 2")
        if int(self.min_gap_voxels) < 0:
            raise ContractError("min_gap_voxels must be >= 0")
        if self.classifier_gate not in (GATE_ON, GATE_OFF):
            raise ContractError(f"classifier_gate must be {GATE_ON!r} or {GATE_OFF!r}")
        if self.context_voxels < 0 or self.min_spur_mm < 0:
            raise ContractError("context_voxels and min_spur_mm must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RepairConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown repair config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class CandidateConnection:
    endpoint: int  # node id
    endpoint_xyz: tuple
    target: tuple  # skeleton voxel
    gap_mm: float
    bend_deg: float
    path: np.ndarray
    endpoint_component: int
    target_component: int
    radius_mm: float | None = None
    label: str = UNCLASSIFIED
    probabilities: np.ndarray | None = None
    accepted: bool = False  # passed the acyclicity sweep
    bridged: bool = False  # drawn into the repaired mask

    def to_json(self) -> dict:
        return {
            "endpoint": self.endpoint,
            "endpoint_xyz": list(self.endpoint_xyz),
            "target_xyz": list(self.target),
            "gap_mm": self.gap_mm,
            "bend_deg": self.bend_deg,
            "label": self.label,
            "probabilities": None if self.probabilities is None else [float(p) for p in self.probabilities],
            "accepted": self.accepted,
            "bridged": self.bridged,
            "radius_mm": self.radius_mm,
            "same_component": self.endpoint_component == self.target_component,
        }


@dataclass(eq=False)
class RepairReport:
    config: RepairConfig
    candidates: list = field(default_factory=list)
    components_before: int = 0
    components_after: int = 0

    @property
    def accepted(self) -> list:
        return [c for c in self.candidates if c.accepted]

    @property
    def bridged(self) -> list:
        return [c for c in self.candidates if c.bridged]

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": asdict(self.config),
            "components_before": self.components_before,
            "components_after": self.components_after,
            "n_candidates": len(self.candidates),
            "n_accepted": len(self.accepted),
            "n_bridged": len(self.bridged),
            "candidates": [c.to_json() for c in self.candidates],
        }


def _tip_walk(graph: SkeletonGraph, node_id: int, window: int) -> np.ndarray:
    """Up to ``window`` voxels of the node's edge, starting at the node."""
    node = graph.nodes[node_id]
    for edge_id, pos in graph.edges_of_voxel[node.voxel]:
        edge = graph.edges[edge_id]
        poly = edge.polyline if pos == 0 else edge.polyline[::-1]
        return poly[:window]
    return graph.coords[node.voxel : node.voxel + 1]


def endpoint_tangent(graph: SkeletonGraph, endpoint: int, window: int = 5):
    """Outward unit direction at an endpoint, in mm space.

    The direction points from the mean of the first ``window`` voxels of the
    endpoint's edge (the endpoint included) toward the endpoint.  Returns
    ``(vector, usable)``; isolated voxels give the zero vector and
    ``usable=False``, which switches the angle test off for them.
    """
    node = graph.nodes[endpoint]
    if node.kind not in (ENDPOINT, ISOLATED):
        raise ContractError(f"node {endpoint} is a {node.kind}, not an endpoint")
    sp = np.asarray(graph.spacing, dtype=float)
    pts = _tip_walk(graph, endpoint, window).astype(float) * sp
    tip = np.asarray(node.xyz, dtype=float) * sp
    v = tip - pts.mean(axis=0)
    norm = np.linalg.norm(v)
    if node.kind == ISOLATED or norm == 0:
        return np.zeros(3), False
    return v / norm, True


def _bend_deg(tangent, direction) -> float:
    c = float(np.clip(np.dot(tangent, direction), -1.0, 1.0))
    return float(np.degrees(np.arccos(c)))


def _endpoint_candidates(graph, tree, node, config, sp, min_gap):
    tangent, usable = endpoint_tangent(graph, node.id, config.tangent_window_voxels)
    tip_mm = np.asarray(node.xyz, dtype=float) * sp
    rows = tree.query_ball_point(tip_mm, config.search_radius_mm + 1e-9)
    own = {tuple(v) for v in _tip_walk(graph, node.id, config.tangent_window_voxels).tolist()}
    out = []
    for row in sorted(rows):
        target = tuple(int(v) for v in graph.coords[row])
        if target in own or row == node.voxel:
            continue
        delta = graph.coords[row] * sp - tip_mm
        gap = float(np.linalg.norm(delta))
        if gap > config.search_radius_mm or gap < min_gap:
            continue
        bend = _bend_deg(tangent, delta / gap) if usable else 0.0
        if usable and bend > config.max_bend_deg + 1e-9:
            continue
        out.append(
            CandidateConnection(
                endpoint=node.id,
                endpoint_xyz=tuple(node.xyz),
                target=target,
                gap_mm=gap,
                bend_deg=bend,
                path=rasterize_path(node.xyz, target),
                endpoint_component=node.component,
                target_component=int(graph.component[row]),
            )
        )
    return out


def find_candidates(graph: SkeletonGraph, skel=None, config: RepairConfig | None = None, jobs: int = 1) -> list:
    """All endpoint-to-skeleton links within the search radius and bend limit.

    Voxels of the endpoint's own edge within the tangent window are skipped.
    Sorted by (gap_mm, bend_deg, target linear index, endpoint linear index).
    """
    config = config or RepairConfig()
    if len(graph.coords) == 0:
        return []
    sp = np.asarray(graph.spacing, dtype=float)
    tree = cKDTree(graph.coords * sp)
    min_gap = config.min_gap_voxels * float(sp.min()) - 1e-9
    ends = graph.endpoints()
    work = lambda node: _endpoint_candidates(graph, tree, node, config, sp, min_gap)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(work, ends))
    else:
        parts = [work(n) for n in ends]
    cands = [c for part in parts for c in part]
    dims = graph.dims
    cands.sort(
        key=lambda c: (
            c.gap_mm,
            c.bend_deg,
            int(linear_index(np.asarray(c.target), dims)),
            int(linear_index(np.asarray(c.endpoint_xyz), dims)),
        )
    )
    return cands


def select_connections(candidates: list, graph: SkeletonGraph) -> list:
    """Greedy acyclic selection over the pre-sorted candidates.

    A candidate is accepted when its endpoint has not been used yet and the
    two sides are in different components of skeleton plus accepted links.
    Sets the ``accepted`` flag and returns the accepted candidates in sweep
    order.
    """
    uf = UnionFind(graph.n_components)
    used = set()
    accepted = []
    for c in candidates:
        c.accepted = False
        if c.endpoint in used:
            continue
        if not uf.union(c.endpoint_component, c.target_component):
            continue
        used.add(c.endpoint)
        c.accepted = True
        accepted.append(c)
    return accepted


def connection_radius(endpoint_a, endpoint_b, dist) -> float:
    """Mean lumen radius at the two attachment voxels, at least one voxel."""
    values = []
    for v in (endpoint_a, endpoint_b):
        r = float(dist.data[tuple(int(c) for c in v)])
        if r <= 0:
            raise ContractError(f"attachment voxel {tuple(v)} lies on background")
        values.append(r)
    return max(float(np.mean(values)), float(max(dist.spacing)))


def _paint(data: np.ndarray, path: np.ndarray, offsets: np.ndarray) -> None:
    pts = (path[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    inside = np.all((pts >= 0) & (pts < np.asarray(data.shape)), axis=1)
    pts = pts[inside]
    data[pts[:, 0], pts[:, 1], pts[:, 2]] = True


def _touches(labels: np.ndarray, p, label: int) -> bool:
    lo = np.maximum(np.asarray(p) - 1, 0)
    hi = np.asarray(p) + 2
    return bool(np.any(labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] == label))


def _drawn_path(path: np.ndarray, labels: np.ndarray, source, target) -> np.ndarray:
    """The stretch of the link between the two components it joins.

    Starts at the last voxel touching the source component before the line
    first touches the target component, and ends there.
    """
    src = labels[tuple(int(v) for v in source)]
    goal = labels[tuple(int(v) for v in target)]
    end = next((i for i in range(1, len(path)) if _touches(labels, path[i], goal)), len(path) - 1)
    start = max(i for i in range(end + 1) if _touches(labels, path[i], src))
    return path[start : end + 1]


def _draw(data: np.ndarray, path: np.ndarray, radius_mm: float, spacing, rank: int):
    """Paint the link, thinning it down to a bare voxel line if the tube would close a loop."""
    for r in (radius_mm, 0.0):
        trial = data.copy()
        _paint(trial, path, ball_offsets(r, spacing) if r > 0 else np.zeros((1, 3), dtype=np.int64))
        if cycle_rank(trial) <= rank:
            return trial, r
    return None, None


def _context(graph, c: CandidateConnection, n: int):
    """Skeleton voxels behind the endpoint and beyond the target."""
    if n <= 0:
        return None, None
    a = np.asarray(c.endpoint_xyz)
    b = np.asarray(c.target)
    d = (b - a).astype(float)
    before = trace_skeleton(graph, graph.row_of(a), -d, n)
    after = trace_skeleton(graph, graph.row_of(b), d, n)
    return before, after


def _predict_proba(model, X):
    if hasattr(model, "predict_proba"):
        return np.asarray(model.predict_proba(X), dtype=float)
    raise ContractError("model must provide predict_proba")


def repair_mask(mask, volume=None, config: RepairConfig | None = None, model=None, jobs: int = 1):
    """Reconnect a broken mask.  Returns ``(repaired, report)``.

    With the gate on, each link that survives the acyclicity sweep is
    classified from its intensity profile and only true_airway links are
    drawn.  The repaired mask always contains the input mask.
    """
    config = config or RepairConfig()
    mask = as_mask(mask)
    gate = config.classifier_gate == GATE_ON
    if gate and model is None:
        raise ContractError("model required")
    if volume is not None:
        volume = as_volume(volume, mask.spacing)
        check_same_geometry(mask, volume, "mask/volume")
    elif gate:
        raise ContractError("volume required when the classifier gate is on")

    report = RepairReport(config)
    report.components_before = component_count(mask)
    skel = skeletonize(mask, config.min_spur_mm)
    graph = build_graph(skel)
    cands = find_candidates(graph, skel, config, jobs=jobs)
    accepted = select_connections(cands, graph)
    report.candidates = cands

    if gate and accepted:
        profiles = []
        for c in accepted:
            before, after = _context(graph, c, config.context_voxels)
            profiles.append(extract_profile(volume, c.path, config.context_voxels, before, after).samples)
        proba = _predict_proba(model, np.stack(profiles))
        for c, p in zip(accepted, proba):
            c.probabilities = p
            c.label = CLASSES[int(np.argmax(p))]

    data = mask.data.copy()
    if accepted:
        dist = distance_transform(mask)
        labels = connected_components(mask).labels
        rank = cycle_rank(data)
    for c in accepted:
        if gate and c.label != CLASSES[0]:
            continue
        radius = connection_radius(c.endpoint_xyz, c.target, dist)
        drawn, c.radius_mm = _draw(data, _drawn_path(c.path, labels, c.endpoint_xyz, c.target), radius, mask.spacing, rank)
        if drawn is not None:
            data = drawn
            c.bridged = True
    repaired = mask.with_data(data)
    report.components_after = component_count(repaired)
    return repaired, report


class DiscontinuityRepairer(TransformerMixin, BaseEstimator):
    """Estimator front end to :func:`repair_mask`.

    ``transform(mask, volume)`` returns the repaired BinaryMask and stores
    the RepairReport in ``report_``.
    """

    def __init__(
        self,
        search_radius_mm=10.0,
        max_bend_deg=60.0,
        tangent_window_voxels=5,
        min_gap_voxels=1,
        classifier_gate=GATE_ON,
        context_voxels=CONTEXT_VOXELS,
        min_spur_mm=0.0,
        model=None,
        jobs=1,
    ):
        self.search_radius_mm = search_radius_mm
        self.max_bend_deg = max_bend_deg
        self.tangent_window_voxels = tangent_window_voxels
        self.min_gap_voxels = min_gap_voxels
        self.classifier_gate = classifier_gate
        self.context_voxels = context_voxels
        self.min_spur_mm = min_spur_mm
        self.model = model
        self.jobs = jobs

    def _config(self) -> RepairConfig:
        return RepairConfig(
            search_radius_mm=self.search_radius_mm,
            max_bend_deg=self.max_bend_deg,
            tangent_window_voxels=self.tangent_window_voxels,
            min_gap_voxels=self.min_gap_voxels,
            classifier_gate=self.classifier_gate,
            context_voxels=self.context_voxels,
            min_spur_mm=self.min_spur_mm,
        )

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        if self.config_.classifier_gate == GATE_ON and self.model is None:
            raise ContractError("model required")
        return self

    def transform(self, X, volume=None) -> BinaryMask:
        if not hasattr(self, "config_"):
            self.fit()
        repaired, self.report_ = repair_mask(X, volume, self.config_, self.model, jobs=self.jobs)
        return repaired
