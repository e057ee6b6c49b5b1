"""Change detection and Gaussian-map updating against a fresh LiDAR submap."""

from ._accel import backend, set_backend, set_num_threads
from .depth import DepthMap, PearsonResult, pearson_loss, pearson_stats, read_depth
from .detection import DetectionParams, detect_changes, detect_disappearing, detect_emerging
from .model import (
    ChangeReport,
    Gaussian,
    GaussianMap,
    PointCloud,
    RigidTransform,
    SplatError,
    Violation,
    validate_map,
)
from .registration import IcpParams, IcpResult, apply_transform, estimate_rigid_transform, icp_align
from .sh import eval_sh, eval_sh_color, rotate_quaternion, rotate_sh, sh_rotation_from
from .spatial import KdIndex, build_index, knn_query, mean_knn_distance
from .splat_io import (
    assemble_submap,
    read_point_cloud,
    read_poses,
    read_splat_ply,
    voxel_downsample,
    write_point_cloud,
    write_poses,
    write_splat_ply,
)
from .synth import ScenePairSpec, bench_report, eval_detection, gen_scene_pair
from .update import (
    UpdateParams,
    UpdateResult,
    assign_features,
    merge_prior,
    remove_disappearing,
    transform_map,
    update_pipeline,
)

__version__ = "0.1.0"

__all__ = [
    "backend",
    "set_backend",
    "set_num_threads",
    "DepthMap",
    "PearsonResult",
    "pearson_loss",
    "pearson_stats",
    "read_depth",
    "DetectionParams",
    "detect_changes",
    "detect_disappearing",
    "detect_emerging",
    "ChangeReport",
    "Gaussian",
    "GaussianMap",
    "PointCloud",
    "RigidTransform",
    "SplatError",
    "Violation",
    "validate_map",
    "IcpParams",
    "IcpResult",
    "apply_transform",
    "estimate_rigid_transform",
    "icp_align",
    "eval_sh",
    "eval_sh_color",
    "rotate_quaternion",
    "rotate_sh",
    "sh_rotation_from",
    "KdIndex",
    "build_index",
    "knn_query",
    "mean_knn_distance",
    "assemble_submap",
    "read_point_cloud",
    "read_poses",
    "read_splat_ply",
    "voxel_downsample",
    "write_point_cloud",
    "write_poses",
    "write_splat_ply",
    "ScenePairSpec",
    "bench_report",
    "eval_detection",
    "gen_scene_pair",
    "UpdateParams",
    "UpdateResult",
    "assign_features",
    "merge_prior",
    "remove_disappearing",
    "transform_map",
    "update_pipeline",
]
