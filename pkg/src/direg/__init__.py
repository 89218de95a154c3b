"""Unsupervised rigid point-cloud registration by teacher-student distillation.

A momentum teacher generates pseudo-correspondences through feature matching,
RANSAC and geometric refinement; a student descriptor network trains against
them with a hardest-contrastive loss.  No ground-truth poses are touched
anywhere on the training path.
"""

__version__ = "0.1.0"

from .errors import (
    DataError,
    DegenerateInput,
    DiregError,
    EmptyCorrespondences,
    NoOverlap,
    NoValidHypothesis,
    NumericalError,
    SkippedPair,
    Unsupported2D,
)
from .geometry import (
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply,
    compose,
    invert,
    kabsch_solve,
    mse_alignment,
    random_rotation,
    rre,
    rte,
)
from .spatial import build_index, nearest, radius_neighbors, voxel_downsample
from .features import (
    FeatureMatrix,
    NetParams,
    fpfh_compute,
    load_params,
    local_encoding,
    net_forward,
    param_init,
    save_params,
)
from .solvers import (
    RansacConfig,
    RefineConfig,
    icp_refine,
    inlier_ratio,
    match_features,
    ransac_register,
    refine_correspondences,
)
from .distill import (
    DistillSchedule,
    TrainConfig,
    cosine_alpha,
    ema_update,
    generate_pseudo_labels,
    hardest_contrastive_loss,
    train_loop,
    unsupervised_fmr,
)
from .data import SynthConfig, generate_dataset, load_cloud, load_manifest, save_cloud
from .evaluation import EvalConfig, EvalReport, EvalThresholds, evaluate

__all__ = [
    "__version__",
    "DiregError",
    "DataError",
    "NumericalError",
    "DegenerateInput",
    "EmptyCorrespondences",
    "NoValidHypothesis",
    "NoOverlap",
    "SkippedPair",
    "Unsupported2D",
    "RigidTransform",
    "PointCloud",
    "CorrespondenceSet",
    "apply",
    "compose",
    "invert",
    "kabsch_solve",
    "mse_alignment",
    "random_rotation",
    "rre",
    "rte",
    "build_index",
    "nearest",
    "radius_neighbors",
    "voxel_downsample",
    "FeatureMatrix",
    "NetParams",
    "local_encoding",
    "fpfh_compute",
    "net_forward",
    "param_init",
    "save_params",
    "load_params",
    "RansacConfig",
    "RefineConfig",
    "match_features",
    "inlier_ratio",
    "ransac_register",
    "icp_refine",
    "refine_correspondences",
    "DistillSchedule",
    "TrainConfig",
    "cosine_alpha",
    "ema_update",
    "hardest_contrastive_loss",
    "generate_pseudo_labels",
    "train_loop",
    "unsupervised_fmr",
    "SynthConfig",
    "generate_dataset",
    "save_cloud",
    "load_cloud",
    "load_manifest",
    "EvalThresholds",
    "EvalConfig",
    "EvalReport",
    "evaluate",
]
