"""Topology repair and evaluation of 3D airway segmentation masks."""

__version__ = "0.1.0"

from .classifier import ClassifierModel, ProfileClassifier, TrainingConfig, classify, load_model, save_model, train
from .errors import (
    AirwayRepairError,
    BoundsError,
    ContractError,
    DivergenceError,
    FormatError,
    GenerationError,
    GeometryError,
    UndefinedMetricError,
    UnsupportedVersionError,
)
from .metrics import MetricsReport, confusion, dice, evaluate, fpr, hausdorff, hd95, ji, tpr, tree_detected_rate
from .morphology import (
    boundary_voxels,
    component_count,
    connected_components,
    dilate_ball,
    distance_transform,
    largest_component,
)
from .nifti import read_nifti, write_nifti
from .phantom import Break, PhantomSpec, generate, inject_breaks
from .profiles import extract_profile, synthesize_training_set
from .repair import (
    CandidateConnection,
    DiscontinuityRepairer,
    RepairConfig,
    RepairReport,
    connection_radius,
    endpoint_tangent,
    find_candidates,
    rasterize_path,
    repair_mask,
    select_connections,
)
from .skeleton import SkeletonGraph, build_graph, skeletonize, total_centerline_length
from .volume import BinaryMask, Spacing, Volume3D
