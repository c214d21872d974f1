"""motionfit: biomechanically constrained holistic motion fitting from 2D
keypoints, with codebook quantization utilities and motion evaluation
metrics.
"""

from .body_model import (
    CameraIntrinsics,
    Joint,
    MotionSequence,
    MotionState,
    SkeletonModel,
    default_hand_skeleton,
    default_skeleton,
    forward_kinematics,
    load_camera,
    load_motion,
    load_skeleton,
    project,
    rest_state,
    rot6d_to_matrix,
    save_camera,
    save_motion,
    save_skeleton,
)
from .errors import MotionFitError
from .geometry import convex_hull_2d, hull_distance, interval_penalty
from .keypoints import (
    KeypointFrame,
    KeypointSequence,
    fill_missing,
    fuse_confidence_guided,
    parse_keypoints,
    save_keypoints,
)
from .objective import (
    BiomechanicalLimits,
    ObjectiveWeights,
    bio_loss,
    default_limits,
    load_limits,
    save_limits,
    total_objective,
    validate_motion,
)
from .optimizer import (
    FitConfig,
    FitReport,
    StageSpec,
    fit_sequence,
    initialize,
)
from .quantize import Codebook, IndexSequence, quantize_nearest, vq_loss
from .metrics import (
    FeatureSet,
    JointSequence,
    diversity,
    dtw_mje,
    fid,
    mm_dist,
    mr_precision,
    multimodality,
    r_precision,
)
from .estimators import HolisticPoseFitter, NearestCodeQuantizer
from .synthesis import default_camera, keypoints_from_motion, synthesize_motion

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Joint",
    "MotionSequence",
    "MotionState",
    "SkeletonModel",
    "default_hand_skeleton",
    "default_skeleton",
    "forward_kinematics",
    "load_camera",
    "load_motion",
    "load_skeleton",
    "project",
    "rest_state",
    "rot6d_to_matrix",
    "save_camera",
    "save_motion",
    "save_skeleton",
    "MotionFitError",
    "convex_hull_2d",
    "hull_distance",
    "interval_penalty",
    "KeypointFrame",
    "KeypointSequence",
    "fill_missing",
    "fuse_confidence_guided",
    "parse_keypoints",
    "save_keypoints",
    "BiomechanicalLimits",
    "ObjectiveWeights",
    "bio_loss",
    "default_limits",
    "load_limits",
    "save_limits",
    "total_objective",
    "validate_motion",
    "FitConfig",
    "FitReport",
    "StageSpec",
    "fit_sequence",
    "initialize",
    "Codebook",
    "IndexSequence",
    "quantize_nearest",
    "vq_loss",
    "FeatureSet",
    "JointSequence",
    "diversity",
    "dtw_mje",
    "fid",
    "mm_dist",
    "mr_precision",
    "multimodality",
    "r_precision",
    "HolisticPoseFitter",
    "NearestCodeQuantizer",
    "default_camera",
    "keypoints_from_motion",
    "synthesize_motion",
    "__version__",
]
