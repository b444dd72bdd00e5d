"""KITTI-style odometry drift metrics and trajectory export.

t_rel is translation drift as a percentage of subsequence length; r_rel is
rotation drift in degrees per 100 m. Both are averaged over all evaluated
subsequences of nominal lengths 100..800 m, with start frames on a fixed
grid. The metrics depend only on relative poses, so they are invariant to
a global rigid transform applied to both trajectories.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import SE3Pose, geodesic_angle, relative_pose

logger = logging.getLogger(__name__)

DEFAULT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
DEFAULT_START_STEP = 10  # frames between evaluated start points
MARKER_EVERY = 50  # frames between trajectory markers (5 s at 10 Hz)


@dataclass(frozen=True)
class LengthErrors:
    length_m: float
    t_rel_percent: float
    r_rel_deg_per_100m: float
    count: int


@dataclass(frozen=True)
class TrajectoryMetrics:
    """Aggregate drift plus the per-subsequence-length breakdown."""

    t_rel_percent: float
    r_rel_deg_per_100m: float
    total_count: int
    per_length: tuple[LengthErrors, ...]

    def as_dict(self) -> dict:
        return {
            "t_rel_percent": self.t_rel_percent,
            "r_rel_deg_per_100m": self.r_rel_deg_per_100m,
            "total_subsequences": self.total_count,
            "per_length": [
                {
                    "length_m": e.length_m,
                    "t_rel_percent": e.t_rel_percent,
                    "r_rel_deg_per_100m": e.r_rel_deg_per_100m,
                    "count": e.count,
                }
                for e in self.per_length
            ],
        }


def cumulative_distance(abs_poses: list[SE3Pose]) -> np.ndarray:
    """Distance traveled up to each pose: d[0] = 0, then summed step norms."""
    if not abs_poses:
        raise ValueError("need at least one pose")
    d = np.zeros(len(abs_poses))
    for i in range(1, len(abs_poses)):
        d[i] = d[i - 1] + float(
            np.linalg.norm(abs_poses[i].translation - abs_poses[i - 1].translation)
        )
    return d


def kitti_relative_errors(
    gt_abs: list[SE3Pose],
    est_abs: list[SE3Pose],
    lengths: tuple[float, ...] = DEFAULT_LENGTHS,
    start_step: int = DEFAULT_START_STEP,
) -> TrajectoryMetrics:
    """Average drift of all distance-based subsequences.

    For every start frame on the grid and every nominal length L, the end
    frame is the first one at least L meters (of ground-truth travel) past
    the start. The error pose compares the ground-truth and estimated
    relative motions over that span; its translation norm contributes
    100 * |t| / L percent and its rotation angle 100 * angle_deg / L degrees
    per 100 m. Subsequences that run off the end of the trajectory are
    skipped; a too-short trajectory yields empty metrics with count 0.
    """
    if len(gt_abs) != len(est_abs):
        raise ValueError(
            f"trajectory lengths differ: {len(gt_abs)} ground truth vs {len(est_abs)} estimated"
        )
    if len(gt_abs) < 2:
        raise ValueError("need at least two poses to evaluate")

    dist = cumulative_distance(gt_abs)
    sums: dict[float, list[float]] = {l: [0.0, 0.0, 0] for l in lengths}

    for i in range(0, len(gt_abs), start_step):
        j = i
        for length in sorted(lengths):
            while j < len(gt_abs) and dist[j] - dist[i] < length:
                j += 1
            if j >= len(gt_abs):
                break
            gt_rel = relative_pose(gt_abs[i], gt_abs[j])
            est_rel = relative_pose(est_abs[i], est_abs[j])
            err = relative_pose(gt_rel, est_rel)
            bucket = sums[length]
            bucket[0] += 100.0 * float(np.linalg.norm(err.translation)) / length
            bucket[1] += 100.0 * math.degrees(geodesic_angle(np.eye(3), err.rotation)) / length
            bucket[2] += 1

    per_length = []
    t_total = r_total = 0.0
    count = 0
    for length in lengths:
        t_sum, r_sum, n = sums[length]
        if n:
            per_length.append(LengthErrors(length, t_sum / n, r_sum / n, n))
            t_total += t_sum
            r_total += r_sum
            count += n
    return TrajectoryMetrics(
        t_rel_percent=t_total / count if count else 0.0,
        r_rel_deg_per_100m=r_total / count if count else 0.0,
        total_count=count,
        per_length=tuple(per_length),
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_trajectory_csv(path, abs_poses: list[SE3Pose]) -> None:
    """CSV of time index and x, y, z coordinates, reloadable to 1e-9."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "x", "y", "z"])
        for i, p in enumerate(abs_poses):
            writer.writerow([i] + [f"{v:.12g}" for v in p.translation])


def read_trajectory_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row[1:]] for row in rows[1:]])


def plot_trajectories(named_poses: dict[str, list[SE3Pose]], fig_path, marker_every: int = MARKER_EVERY) -> None:
    """Two-panel vector figure: top-down x-z and vertical y against distance.

    Markers every `marker_every` frames give a sense of speed along the
    path. Output format follows the file suffix (SVG by default); date
    metadata is stripped so identical inputs produce identical bytes.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "viofusion"}):
        fig, (ax_top, ax_alt) = plt.subplots(1, 2, figsize=(10, 4.5))
        for label, poses in named_poses.items():
            xyz = np.stack([p.translation for p in poses])
            dist = cumulative_distance(poses)
            (line,) = ax_top.plot(xyz[:, 0], xyz[:, 2], label=label, linewidth=1.2)
            ax_top.plot(
                xyz[::marker_every, 0], xyz[::marker_every, 2],
                "o", color=line.get_color(), markersize=2.5,
            )
            ax_alt.plot(dist, xyz[:, 1], label=label, linewidth=1.2, color=line.get_color())
            ax_alt.plot(
                dist[::marker_every], xyz[::marker_every, 1],
                "o", color=line.get_color(), markersize=2.5,
            )
        ax_top.set_xlabel("x [m]")
        ax_top.set_ylabel("z [m]")
        ax_top.set_title("top-down")
        ax_top.set_aspect("equal", adjustable="datalim")
        ax_top.legend(fontsize=8)
        ax_alt.set_xlabel("distance traveled [m]")
        ax_alt.set_ylabel("y [m] (vertical)")
        ax_alt.set_title("vertical profile")
        fig.tight_layout()
        fig.savefig(fig_path, metadata={"Date": None})
        plt.close(fig)


def export_trajectory(
    abs_poses: list[SE3Pose], out_dir, stem: str = "trajectory",
    marker_every: int = MARKER_EVERY,
) -> tuple[Path, Path]:
    """Write <stem>.csv and <stem>.svg for one trajectory; returns both paths."""
    if not abs_poses:
        raise ValueError("need at least one pose to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    fig_path = out_dir / f"{stem}.svg"
    write_trajectory_csv(csv_path, abs_poses)
    plot_trajectories({stem: abs_poses}, fig_path, marker_every=marker_every)
    return csv_path, fig_path
