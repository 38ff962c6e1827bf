"""Depth-distribution supervision and BEV feature distillation for
camera-based 3D detection students, with a synthetic-scene harness.

Everything is plain numpy with hand-derived gradients; runs are
deterministic for a fixed seed at any thread count.
"""

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    GenerationError,
    NumericError,
    ShapeError,
    SkippedTargetError,
)
from .rng import CounterRng, fnv1a64, mix64
from .numerics import (
    LossResult,
    as_tensor,
    check_finite,
    finite_difference_gradient,
    frobenius_sq_distance,
    matmul,
    read_tsr,
    softmax_rows,
    tsr_string,
    write_tsr,
)
from .geometry import (
    BevGrid,
    Box3D,
    CameraModel,
    ForegroundDepthSet,
    ProjectedPoints,
    RigidTransform,
    bev_to_world,
    box_bev_corners,
    build_gt_depth_map,
    enlarge_box_bev,
    foreground_pixel_sets,
    normalize_yaw,
    points_in_box,
    project_points,
    rot_z,
    unproject_pixel,
    world_to_bev,
)
from .depth_supervision import (
    BCE_CLAMP,
    LOSS_REDUCTIONS,
    REFERENCE_STRATEGIES,
    CategoricalDepthMap,
    DepthBins,
    ReferenceSelection,
    absolute_depth_loss,
    assign_depth_bins,
    continuous_depth,
    continuous_depth_map,
    inner_depth_loss,
    relative_depths,
    select_reference,
)
from .bev_distillation import (
    GRAM_NORMALIZATIONS,
    BevFeatureMap,
    GramPair,
    KeypointSet,
    TargetKeypointFeatures,
    bev_distill_loss,
    bev_distill_terms,
    bilinear_sample,
    bilinear_sample_backward,
    gram_pair,
    inter_channel_gram,
    inter_channel_loss,
    inter_keypoint_gram,
    inter_keypoint_loss,
    keypoint_sets_for_boxes,
    sample_keypoints,
)
from .scenegen import (
    SceneConfig,
    SyntheticScene,
    ViewGroundTruth,
    generate_scene,
    generate_teacher_bev,
    read_scene,
    render_gt_views,
    write_scene,
)
from .harness import (
    GradcheckConfig,
    HarnessConfig,
    LossWeights,
    OptimizerConfig,
    RunReport,
    config_from_dict,
    config_to_dict,
    default_config,
    evaluate_scene_losses,
    identity_student_inputs,
    load_config,
    parallel_map,
    random_student_inputs,
    run_gradcheck,
    run_train_toy,
    thread_count,
    total_loss,
    write_report,
)

__version__ = "0.1.0"

__all__ = [
    "BCE_CLAMP",
    "BevFeatureMap",
    "BevGrid",
    "Box3D",
    "CameraModel",
    "CategoricalDepthMap",
    "ConfigError",
    "ContractError",
    "CounterRng",
    "DepthBins",
    "ForegroundDepthSet",
    "FormatError",
    "GRAM_NORMALIZATIONS",
    "GenerationError",
    "GradcheckConfig",
    "GramPair",
    "HarnessConfig",
    "KeypointSet",
    "LOSS_REDUCTIONS",
    "LossResult",
    "LossWeights",
    "NumericError",
    "OptimizerConfig",
    "ProjectedPoints",
    "REFERENCE_STRATEGIES",
    "ReferenceSelection",
    "RigidTransform",
    "RunReport",
    "SceneConfig",
    "ShapeError",
    "SkippedTargetError",
    "SyntheticScene",
    "TargetKeypointFeatures",
    "ViewGroundTruth",
    "absolute_depth_loss",
    "as_tensor",
    "assign_depth_bins",
    "bev_distill_loss",
    "bev_distill_terms",
    "bev_to_world",
    "bilinear_sample",
    "bilinear_sample_backward",
    "box_bev_corners",
    "build_gt_depth_map",
    "check_finite",
    "config_from_dict",
    "config_to_dict",
    "continuous_depth",
    "continuous_depth_map",
    "default_config",
    "enlarge_box_bev",
    "evaluate_scene_losses",
    "finite_difference_gradient",
    "fnv1a64",
    "foreground_pixel_sets",
    "frobenius_sq_distance",
    "generate_scene",
    "generate_teacher_bev",
    "gram_pair",
    "identity_student_inputs",
    "inner_depth_loss",
    "inter_channel_gram",
    "inter_channel_loss",
    "inter_keypoint_gram",
    "inter_keypoint_loss",
    "keypoint_sets_for_boxes",
    "load_config",
    "matmul",
    "mix64",
    "normalize_yaw",
    "parallel_map",
    "points_in_box",
    "project_points",
    "random_student_inputs",
    "read_scene",
    "read_tsr",
    "relative_depths",
    "render_gt_views",
    "rot_z",
    "run_gradcheck",
    "run_train_toy",
    "sample_keypoints",
    "select_reference",
    "softmax_rows",
    "thread_count",
    "total_loss",
    "tsr_string",
    "unproject_pixel",
    "world_to_bev",
    "write_report",
    "write_scene",
    "write_tsr",
]
