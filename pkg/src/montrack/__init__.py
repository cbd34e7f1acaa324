"""Real-time-oriented monocular human performance capture.

Per frame, a skeletal pose is solved from 2D/3D joint detections and the
foreground silhouette (Stage I), then the surface is registered non-rigidly
to the image evidence (Stage II), with optional contour snapping and
output-trajectory smoothing. A synthetic generator provides sequences with
exact ground truth for evaluation.
"""

from .actors import build_actor, suggest_camera
from .camera import CameraIntrinsics
from .evaluation import evaluate_tracking
from .gradcheck import GradcheckConfig, run_gradcheck
from .metrics import aligned_joint_error, iou, mean_vertex_error
from .pipeline import (SequenceConfig, SequenceInputs, load_sequence_inputs,
                       run_sequence, save_results)
from .skinning import PoseParams, forward_kinematics, skin_points
from .synthetic import (MotionScript, NoiseParams, default_script,
                        generate_synthetic_sequence, save_synthetic_sequence)
from .template import Actor, Skeleton, SkinningWeights, TemplateMesh, load_actor

__version__ = "0.1.0"

__all__ = [
    "Actor", "CameraIntrinsics", "GradcheckConfig", "MotionScript",
    "NoiseParams", "PoseParams", "SequenceConfig", "SequenceInputs",
    "Skeleton", "SkinningWeights", "TemplateMesh", "aligned_joint_error",
    "build_actor", "default_script", "evaluate_tracking",
    "forward_kinematics", "generate_synthetic_sequence", "iou",
    "load_actor", "load_sequence_inputs", "mean_vertex_error",
    "run_gradcheck", "run_sequence", "save_results",
    "save_synthetic_sequence", "skin_points", "suggest_camera",
]
