"""Pose estimation from precomputed visual-inertial latents: a causal
transformer fusion model with manifold-aware rotation gradients, a synthetic
data generator, and KITTI-style drift evaluation."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    SE3Pose,
    accumulate,
    euler_to_matrix,
    geodesic_angle,
    matrix_to_euler,
    relative_pose,
    se3_compose,
    se3_inverse,
    so3_exp,
    so3_log,
    svd_orthogonalize,
)
from .autodiff import Tape, Tensor, finite_diff_check  # noqa: F401
from .rpmg import RpmgParams, rpmg_grad  # noqa: F401
from .model import (  # noqa: F401
    FusionConfig,
    FusionWeights,
    MlpConfig,
    PoseEstimate,
    estimate_to_pose,
    forward_window,
    init_weights,
    load_checkpoint,
    save_checkpoint,
    sliding_window_infer,
)
from .data import (  # noqa: F401
    LatentWindow,
    SequenceDataset,
    SyntheticSpec,
    generate_synthetic,
    load_sequence,
    parse_kitti_poses,
    window_dataset,
    write_sequence,
)
from .training import TrainConfig, lr_schedule, pose_loss, train  # noqa: F401
from .evaluation import TrajectoryMetrics, export_trajectory, kitti_relative_errors  # noqa: F401
