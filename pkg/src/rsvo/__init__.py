"""Monocular rolling-shutter visual odometry from two-view feature correspondences."""
from .epipolar import Correspondence, NominalState, gs_essential, rs_essential, sampson_residual
from .evalbench import BenchConfig, concat_trajectory, pose_error, run_benchmark
from .geometry import (CameraIntrinsics, ImagePoint, InstantaneousMotion, RigidTransform,
                       UnitQuaternion, project_gs, project_rs)
from .initializer import decompose_essential, eight_point_essential, initial_pose
from .ransac import EstimationResult, RansacConfig, count_inliers, mrsvo_estimate, mvo_estimate
from .refiner import ErrorState, LmConfig, lm_refine

__all__ = [
    "BenchConfig", "CameraIntrinsics", "Correspondence", "ErrorState", "EstimationResult",
    "ImagePoint", "InstantaneousMotion", "LmConfig", "NominalState", "RansacConfig",
    "RigidTransform", "UnitQuaternion", "concat_trajectory", "count_inliers",
    "decompose_essential", "eight_point_essential", "gs_essential", "initial_pose", "lm_refine",
    "mrsvo_estimate", "mvo_estimate", "pose_error", "project_gs", "project_rs", "rs_essential",
    "run_benchmark", "sampson_residual",
]
