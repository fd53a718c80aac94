"""Voxel overlap, boundary distance and centerline-length metrics for mask pairs."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import UndefinedMetricError
from .morphology import STRUCTURE_26, boundary_mask, largest_component
from .skeleton import skeletonize, total_centerline_length
from .volume import as_mask, check_same_geometry

DEFINITIONS_VERSION = "1"
SCHEMA_VERSION = 1
TD_PAPER_RAW = "paper_raw"
TD_GT_RESTRICTED = "gt_restricted"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt) -> ConfusionCounts:
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_geometry(pred, gt, "pred/gt")
    p, g = pred.data, gt.data
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


# Degenerate denominators take their conventional limits: an empty
# prediction of an empty target is a perfect match, and a grid without
# background has no false positives to speak of.


def dice(c: ConfusionCounts) -> float:
    den = 2 * c.tp + c.fp + c.fn
    return 1.0 if den == 0 else 2 * c.tp / den


def tpr(c: ConfusionCounts) -> float:
    den = c.tp + c.fn
    return 1.0 if den == 0 else c.tp / den


def fpr(c: ConfusionCounts) -> float:
    den = c.fp + c.tn
    return 0.0 if den == 0 else c.fp / den


def ji(c: ConfusionCounts) -> float:
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance (mm) from every ``src`` voxel to the nearest ``dst`` voxel."""
    field = ndi.distance_transform_edt(~dst, sampling=spacing)
    return field[src]


def boundary_distances(pred, gt):
    """Directed nearest-boundary distances pred->gt and gt->pred, in mm."""
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_geometry(pred, gt, "pred/gt")
    if not pred.data.any() or not gt.data.any():
        raise UndefinedMetricError("Hausdorff distance is undefined for an empty mask")
    bp, bg = boundary_mask(pred), boundary_mask(gt)
    sp = tuple(float(s) for s in pred.spacing)
    return _directed(bp, bg, sp), _directed(bg, bp, sp)


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between the boundary voxel sets, in mm."""
    a, b = boundary_distances(pred, gt)
    return float(max(a.max(), b.max()))


def hd95(pred, gt) -> float:
    """95th percentile of the pooled directed boundary distances."""
    a, b = boundary_distances(pred, gt)
    return float(np.percentile(np.concatenate([a, b]), 95))


def tree_detected_rate(pred, gt, mode: str = TD_GT_RESTRICTED, min_spur_mm: float = 0.0) -> float:
    """Predicted centerline length over ground-truth centerline length.

    ``paper_raw`` uses the whole predicted skeleton; ``gt_restricted`` keeps
    only predicted skeleton voxels inside the ground truth dilated by one
    voxel (26-neighbourhood).
    """
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_geometry(pred, gt, "pred/gt")
    gt_len = total_centerline_length(skeletonize(gt, min_spur_mm))
    if gt_len == 0:
        raise UndefinedMetricError("tree detected rate needs a non-empty ground-truth skeleton")
    ps = skeletonize(pred, min_spur_mm)
    if mode == TD_GT_RESTRICTED:
        near = ndi.binary_dilation(gt.data, structure=STRUCTURE_26)
        ps = ps.with_data(ps.data & near)
    elif mode != TD_PAPER_RAW:
        raise ValueError(f"unknown TD mode {mode!r}")
    return total_centerline_length(ps) / gt_len


@dataclass(frozen=True)
class MetricsReport:
    dice: float
    tpr: float
    fpr: float
    ji: float
    hd_mm: float
    td: float
    td_paper_raw: float
    td_gt_restricted: float
    td_mode: str = TD_GT_RESTRICTED
    hd95_mm: float | None = None
    largest_component: bool = True
    confusion: ConfusionCounts | None = None
    definitions_version: str = DEFINITIONS_VERSION

    def to_json(self) -> dict:
        out = asdict(self)
        out["confusion"] = asdict(self.confusion) if self.confusion else None
        out["schema_version"] = SCHEMA_VERSION
        return out


def evaluate(pred, gt, largest_cc=True, with_hd95=False, td_mode=TD_GT_RESTRICTED) -> MetricsReport:
    """Full metric suite; by default only the prediction's largest component is scored."""
    pred, gt = as_mask(pred), as_mask(gt)
    check_same_geometry(pred, gt, "pred/gt")
    if largest_cc:
        pred = largest_component(pred)
    c = confusion(pred, gt)
    raw = tree_detected_rate(pred, gt, TD_PAPER_RAW)
    restricted = tree_detected_rate(pred, gt, TD_GT_RESTRICTED)
    return MetricsReport(
        dice=dice(c),
        tpr=tpr(c),
        fpr=fpr(c),
        ji=ji(c),
        hd_mm=hausdorff(pred, gt),
        td=restricted if td_mode == TD_GT_RESTRICTED else raw,
        td_paper_raw=raw,
        td_gt_restricted=restricted,
        td_mode=td_mode,
        hd95_mm=hd95(pred, gt) if with_hd95 else None,
        largest_component=largest_cc,
        confusion=c,
    )


TABLE_COLUMNS = ("Dice", "TPR", "FPR (x10^-4)", "JI", "HD (mm)", "TD")


def format_table(reports, names=None) -> str:
    """Aligned text table; FPR is shown multiplied by 10^4."""
    names = names or [str(i) for i in range(len(reports))]
    head = ("case",) + TABLE_COLUMNS
    rows = [
        (
            name,
            f"{r.dice:.4f}",
            f"{r.tpr:.4f}",
            f"{r.fpr * 1e4:.4f}",
            f"{r.ji:.4f}",
            f"{r.hd_mm:.4f}",
            f"{r.td:.4f}",
        )
        for name, r in zip(names, reports)
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
    line = lambda cells: "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    return "\n".join([line(head)] + [line(r) for r in rows]) + "\n"
