"""Joint metric-scale reconstruction of humans, scene pointmaps, and cameras."""

from .body import (
    HumanParams,
    SkeletonTemplate,
    default_template,
    forward_kinematics,
    mean_bone_length_3d,
)
from .geometry import (
    CameraModel,
    Intrinsics,
    Rotation3,
    SimilarityTransform,
    project,
    relative_rotation_angle,
    umeyama_align,
    unproject_pointmap,
)
from .metrics import EvalReport, evaluate_world
from .observations import (
    DepthMap,
    KeypointObservation,
    PairwiseObservation,
    Scene,
    WorldState,
    load_scene,
    world_pointmap,
)
from .optim import LossBreakdown, OptimConfig, run_hsfm
from .synth import NoiseModel, SynthConfig, generate
from .world_init import InitOptions, InitReport, initialize_world

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "DepthMap", "EvalReport", "HumanParams", "InitOptions",
    "InitReport", "Intrinsics", "KeypointObservation", "LossBreakdown",
    "NoiseModel", "OptimConfig", "PairwiseObservation", "Rotation3", "Scene",
    "SimilarityTransform", "SkeletonTemplate", "SynthConfig", "WorldState",
    "default_template", "evaluate_world", "forward_kinematics", "generate",
    "initialize_world", "load_scene", "mean_bone_length_3d", "project",
    "relative_rotation_angle", "run_hsfm", "umeyama_align",
    "unproject_pointmap", "world_pointmap",
]
