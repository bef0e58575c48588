"""Privacy-preserving neural segmentation fields for visual localization."""

from .fields import FieldConfig, FieldModel, render_rays, render_view
from .encoder2d import ImageEncoder
from .geometry import Camera, Pose, pose_error, se3_exp, se3_log
from .labeling import PrototypeBank, sinkhorn
from .localization import LocalizationResult, RefineConfig, refine_pose, retrieve_initial_pose
from .scenes import Scene, SceneSpec, ViewSet, generate_scene, generate_trajectory, oracle_render
from .training import TrainConfig, TrainState, train_scene, train_step

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "FieldConfig",
    "FieldModel",
    "ImageEncoder",
    "LocalizationResult",
    "Pose",
    "PrototypeBank",
    "RefineConfig",
    "Scene",
    "SceneSpec",
    "TrainConfig",
    "TrainState",
    "ViewSet",
    "generate_scene",
    "generate_trajectory",
    "oracle_render",
    "pose_error",
    "refine_pose",
    "render_rays",
    "render_view",
    "retrieve_initial_pose",
    "se3_exp",
    "se3_log",
    "sinkhorn",
    "train_scene",
    "train_step",
]
