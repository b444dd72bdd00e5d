"""Dataset ingestion, windowing, and the synthetic latent generator.

On-disk sequence format (format_version 1), one directory per sequence:

  meta.json    {"format_version": 1, "sequence_id": str,
                "latent_dim": int, "count": T}
  latents.bin  little-endian float32, row-major, T x latent_dim
  poses.txt    T+1 ground-truth absolute poses, one per line, in the
               12-number row-major [R|t] convention used by the KITTI
               odometry ground truth

Latent row t describes the transition from frame t to frame t+1, hence the
T / T+1 offset; it is part of the format, never inferred. Latents are
stored float32 and promoted to float64 in memory.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import (
    SE3Pose,
    accumulate,
    euler_to_matrix,
    relative_pose,
    so3_log,
    svd_orthogonalize,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
LATENT_DIM = 768
VISUAL_DIM = 512
FRAME_RATE_HZ = 10.0

# Inertial latent channels carry proportionally less noise than visual ones.
_INERTIAL_NOISE_SCALE = 0.5


@dataclass
class SequenceDataset:
    """Latents aligned with ground-truth poses for one sequence."""

    sequence_id: str
    latents: np.ndarray  # (T, latent_dim) float64
    abs_poses: list[SE3Pose]  # T + 1
    rel_poses: list[SE3Pose]  # T, rel_poses[t] maps frame t to frame t+1

    def __post_init__(self):
        t = self.latents.shape[0]
        if len(self.abs_poses) != t + 1 or len(self.rel_poses) != t:
            raise ValueError(
                f"misaligned sequence: {t} latents, {len(self.abs_poses)} absolute "
                f"poses, {len(self.rel_poses)} relative poses"
            )


@dataclass
class LatentWindow:
    """A length-N slice of latents with its aligned relative poses."""

    latents: np.ndarray  # (N, latent_dim)
    gt_rel: list[SE3Pose]

    def __post_init__(self):
        if self.latents.shape[0] != len(self.gt_rel):
            raise ValueError(
                f"window rows ({self.latents.shape[0]}) != pose count ({len(self.gt_rel)})"
            )


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic ground-vehicle generator."""

    seed: int = 0
    length: int = 500
    mixing: str = "linear"  # or "nonlinear"
    noise_std: float = 0.01
    speed_range: tuple[float, float] = (2.0, 15.0)  # m/s
    yaw_rate_range: tuple[float, float] = (-0.3, 0.3)  # rad/s

    def __post_init__(self):
        if self.mixing not in ("linear", "nonlinear"):
            raise ValueError(f"mixing must be linear or nonlinear, got {self.mixing!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.length < 1:
            raise ValueError("length must be >= 1")


# ---------------------------------------------------------------------------
# KITTI-style pose text
# ---------------------------------------------------------------------------


def parse_kitti_poses(text: str) -> list[SE3Pose]:
    """Parse pose lines of 12 whitespace-separated reals (row-major [R|t]).

    Rotation blocks that drifted from orthonormality by more than 1e-6 are
    re-orthogonalized (and logged). Blank lines are skipped.
    """
    poses: list[SE3Pose] = []
    fixed = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 12:
            raise ValueError(f"pose line {lineno}: expected 12 values, got {len(fields)}")
        try:
            vals = np.array([float(f) for f in fields], dtype=np.float64)
        except ValueError as exc:
            raise ValueError(f"pose line {lineno}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"pose line {lineno}: non-finite value")
        m = vals.reshape(3, 4)
        rot, trans = m[:, :3], m[:, 3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            rot = svd_orthogonalize(rot)
            fixed += 1
        poses.append(SE3Pose(rot, trans.copy()))
    if fixed:
        logger.warning("re-orthogonalized %d drifted rotation(s) while parsing poses", fixed)
    return poses


def format_kitti_poses(poses: list[SE3Pose]) -> str:
    """Serialize poses to the 12-number line format at 12 significant digits.

    parse -> format round-trips bit-comparably on its own output.
    """
    lines = []
    for p in poses:
        m = np.hstack([p.rotation, p.translation.reshape(3, 1)])
        lines.append(" ".join(f"{v:.12g}" for v in m.reshape(12)))
    return "\n".join(lines) + "\n"


def load_poses_file(path) -> list[SE3Pose]:
    return parse_kitti_poses(Path(path).read_text())


def write_poses_file(path, poses: list[SE3Pose]) -> None:
    Path(path).write_text(format_kitti_poses(poses))


# ---------------------------------------------------------------------------
# Sequence directories
# ---------------------------------------------------------------------------


def write_sequence(directory, dataset: SequenceDataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t, dim = dataset.latents.shape
    meta = {
        "format_version": FORMAT_VERSION,
        "sequence_id": dataset.sequence_id,
        "latent_dim": dim,
        "count": t,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    (directory / "latents.bin").write_bytes(
        np.ascontiguousarray(dataset.latents, dtype="<f4").tobytes()
    )
    write_poses_file(directory / "poses.txt", dataset.abs_poses)
    return directory


def load_sequence(directory) -> SequenceDataset:
    """Load a sequence directory, validating sizes across all three files."""
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported sequence format_version {meta.get('format_version')!r}"
        )
    t, dim = int(meta["count"]), int(meta["latent_dim"])

    raw = (directory / "latents.bin").read_bytes()
    poses = load_poses_file(directory / "poses.txt")
    if len(raw) != t * dim * 4 or len(poses) != t + 1:
        raise ValueError(
            f"size mismatch in {directory}: meta says {t} x {dim} latents, "
            f"latents.bin holds {len(raw)} bytes (expected {t * dim * 4}), "
            f"poses.txt holds {len(poses)} poses (expected {t + 1})"
        )
    latents = (
        np.frombuffer(raw, dtype="<f4").reshape(t, dim).astype(np.float64)
    )
    rel = [relative_pose(poses[i], poses[i + 1]) for i in range(t)]
    return SequenceDataset(
        sequence_id=str(meta["sequence_id"]),
        latents=latents,
        abs_poses=poses,
        rel_poses=rel,
    )


def window_dataset(seq: SequenceDataset, n: int, stride: int = 1) -> list[LatentWindow]:
    """Slice a sequence into windows starting at offsets 0, stride, 2*stride, ..."""
    t = seq.latents.shape[0]
    if n > t:
        raise ValueError(f"window size {n} exceeds sequence length {t}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    windows = []
    for start in range(0, t - n + 1, stride):
        windows.append(
            LatentWindow(
                latents=seq.latents[start : start + n],
                gt_rel=seq.rel_poses[start : start + n],
            )
        )
    return windows


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _piecewise_smooth(rng, t, lo, hi, knot_every=50):
    """Random control points every `knot_every` steps, linearly interpolated."""
    knots = max(2, t // knot_every + 2)
    values = rng.uniform(lo, hi, size=knots)
    xp = np.linspace(0.0, t - 1.0, knots)
    return np.interp(np.arange(t, dtype=np.float64), xp, values)


def pose_features(rel: SE3Pose) -> np.ndarray:
    """6-vector summary of a transition: translation then axis-angle rotation."""
    return np.concatenate([rel.translation, so3_log(rel.rotation)])


def generate_synthetic(spec: SyntheticSpec) -> SequenceDataset:
    """Synthesize a ground-vehicle sequence with recoverable latents.

    Camera frame: x right, y down, z forward; driving happens in the x-z
    plane with yaw about y and small roll/pitch perturbations. Latents are
    an affine map of the 6-vector transition features through a fixed
    seeded (latent_dim x 6) matrix, plus per-block Gaussian noise (the
    inertial block gets _INERTIAL_NOISE_SCALE times the visual std). With
    zero noise in linear mode the features are exactly recoverable from the
    latents by least squares, so the learning task is solvable by
    construction. Nonlinear mode squashes the mixed signal through a seeded
    elementwise tanh before the noise is added.
    """
    rng = np.random.default_rng(spec.seed)
    t = spec.length
    dt = 1.0 / FRAME_RATE_HZ

    speed = _piecewise_smooth(rng, t, spec.speed_range[0], spec.speed_range[1])
    yaw_rate = _piecewise_smooth(rng, t, spec.yaw_rate_range[0], spec.yaw_rate_range[1])
    roll = 0.002 * np.sin(np.arange(t) / 17.0) + rng.normal(0.0, 5e-4, t)
    pitch = 0.002 * np.sin(np.arange(t) / 29.0) + rng.normal(0.0, 5e-4, t)
    lateral = rng.normal(0.0, 0.01, t)
    vertical = rng.normal(0.0, 0.005, t)

    rel = []
    for i in range(t):
        rot = euler_to_matrix(np.array([roll[i], pitch[i], yaw_rate[i] * dt]))
        trans = np.array([lateral[i], vertical[i], speed[i] * dt])
        rel.append(SE3Pose(rot, trans))
    origin = SE3Pose.identity()
    abs_poses = [origin] + accumulate(rel, origin)

    phi = np.stack([pose_features(p) for p in rel])  # (T, 6)
    mix = rng.normal(0.0, 1.0 / math.sqrt(6.0), size=(LATENT_DIM, 6))
    offset = rng.normal(0.0, 0.1, size=LATENT_DIM)
    clean = phi @ mix.T + offset
    if spec.mixing == "nonlinear":
        gain = rng.uniform(0.5, 1.5, size=LATENT_DIM)
        shift = rng.normal(0.0, 0.1, size=LATENT_DIM)
        clean = np.tanh(clean * gain + shift)
    noise = rng.normal(0.0, 1.0, size=(t, LATENT_DIM))
    noise[:, :VISUAL_DIM] *= spec.noise_std
    noise[:, VISUAL_DIM:] *= spec.noise_std * _INERTIAL_NOISE_SCALE
    latents = clean + noise

    return SequenceDataset(
        sequence_id=f"synthetic-{spec.seed}",
        latents=latents,
        abs_poses=abs_poses,
        rel_poses=rel,
    )


def recoverability_residual(dataset: SequenceDataset) -> float:
    """Max abs residual of recovering transition features from latents by
    least squares. Near zero for noise-free linear synthetic data; used as
    the task-is-solvable oracle."""
    phi = np.stack([pose_features(p) for p in dataset.rel_poses])
    design = np.hstack([dataset.latents, np.ones((phi.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, phi, rcond=None)
    return float(np.max(np.abs(design @ coef - phi)))
