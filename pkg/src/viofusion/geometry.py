"""SO(3)/SE(3) kernel: rotation representations, conversions, composition,
and trajectory accumulation.

Conventions, fixed across the project:

* Rotation matrices are 3x3 float64 arrays.
* Euler angles are length-3 arrays ``[roll, pitch, yaw]`` in radians with
  the extrinsic X-Y-Z convention: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
  ``matrix_to_euler`` canonicalizes pitch into [-pi/2, pi/2].
* Axis-angle tangent vectors are length-3 arrays whose norm is the rotation
  angle; ``so3_log`` returns vectors with norm <= pi.
* Everything is computed in float64.

All functions are pure and safe for concurrent use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

# Small-angle cutoff for series branches (well below sqrt(eps) so the
# truncation error is invisible at double precision).
_TINY_ANGLE = 1e-8
# Angle-near-pi cutoff; below it the (R - R^T) extraction is still accurate.
_NEAR_PI = 1e-6
# Pitch proximity to +-pi/2 at which Euler extraction is degenerate.
_GIMBAL_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Hat operator: 3-vector to skew-symmetric matrix."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]],
        dtype=np.float64,
    )


def vee(a: np.ndarray) -> np.ndarray:
    """Vee operator: skew-symmetric matrix to 3-vector (inverse of skew)."""
    a = np.asarray(a, dtype=np.float64)
    return np.array([a[2, 1], a[0, 2], a[1, 0]], dtype=np.float64)


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    """True if r is orthonormal with determinant +1 within tol."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    defect = np.max(np.abs(r.T @ r - np.eye(3)))
    return defect < tol and abs(np.linalg.det(r) - 1.0) < tol


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> SO(3) via the Rodrigues formula.

    Total function: any finite 3-vector maps to a valid rotation. Angles
    below _TINY_ANGLE use the first-order series, which is exact to double
    precision there (error O(theta^2) < 1e-16).
    """
    v = np.asarray(v, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(v))
    if theta < _TINY_ANGLE:
        return np.eye(3) + skew(v)
    k = skew(v / theta)
    return np.eye(3) + math.sin(theta) * k + (1.0 - math.cos(theta)) * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Logarithm map SO(3) -> so(3); returns axis-angle with norm <= pi.

    Three branches:
      * theta < _TINY_ANGLE: first-order extraction from the skew part.
      * theta near pi: the skew part vanishes, so the axis is recovered
        from R + I (equivalently the diagonal of the symmetric part),
        which stays accurate to O((pi - theta)^2); the sign comes from
        the residual skew part and is arbitrary at exactly pi.
      * otherwise: standard theta / (2 sin theta) scaling.
    """
    r = np.asarray(r, dtype=np.float64)
    residual = vee(r - r.T) / 2.0  # = sin(theta) * axis
    # atan2 keeps the angle well conditioned where acos(trace) degrades
    # (near pi the trace alone loses ~1e-9 of angle accuracy).
    cos_t = (float(np.trace(r)) - 1.0) / 2.0
    theta = math.atan2(float(np.linalg.norm(residual)), cos_t)

    if theta < _TINY_ANGLE:
        return residual

    if theta > math.pi - _NEAR_PI:
        # axis^2 from the diagonal of (R + I); off-diagonals fix relative
        # signs, the skew part fixes the overall sign when it is nonzero.
        c = math.cos(theta)
        denom = 1.0 - c
        axis_sq = np.clip((np.diag(r) - c) / denom, 0.0, None)
        axis = np.sqrt(axis_sq)
        k = int(np.argmax(axis))
        for j in range(3):
            if j != k and axis[j] > 0.0:
                sym = (r[k, j] + r[j, k]) / (2.0 * denom)
                if sym < 0.0:
                    axis[j] = -axis[j]
        axis /= np.linalg.norm(axis)
        if float(residual @ axis) < 0.0:
            axis = -axis
        return theta * axis

    return theta / math.sin(theta) * residual


def euler_to_matrix(e: np.ndarray) -> np.ndarray:
    """Euler angles [roll, pitch, yaw] to rotation matrix Rz @ Ry @ Rx."""
    roll, pitch, yaw = np.asarray(e, dtype=np.float64).reshape(3)
    ca, sa = math.cos(roll), math.sin(roll)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cc, sc = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cc * cb, -sc * ca + cc * sb * sa, sc * sa + cc * sb * ca],
            [sc * cb, cc * ca + sc * sb * sa, -cc * sa + sc * sb * ca],
            [-sb, cb * sa, cb * ca],
        ],
        dtype=np.float64,
    )


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to Euler angles [roll, pitch, yaw], pitch in [-pi/2, pi/2].

    At gimbal lock (|pitch| within _GIMBAL_TOL of pi/2) only roll +- yaw is
    observable; the yaw = 0 convention is applied and the case is logged.
    """
    r = np.asarray(r, dtype=np.float64)
    sp = -r[2, 0]
    if abs(abs(sp) - 1.0) < _GIMBAL_TOL:
        pitch = math.copysign(math.pi / 2.0, sp)
        if sp > 0.0:
            roll = math.atan2(r[0, 1], r[1, 1])
        else:
            roll = math.atan2(-r[0, 1], r[1, 1])
        logger.debug("gimbal-locked rotation, using yaw=0 convention")
        return np.array([roll, pitch, 0.0], dtype=np.float64)
    pitch = math.asin(min(1.0, max(-1.0, sp)))
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return np.array([roll, pitch, yaw], dtype=np.float64)


def svd_orthogonalize(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix to the nearest rotation (Frobenius norm).

    Computes U diag(1, 1, det(U V^T)) V^T from the SVD; the determinant
    correction keeps the result proper. Inputs that are already rotations
    (orthonormal within 1e-12, positive determinant) are returned unchanged
    so that downstream fixed-point properties hold exactly.

    Raises ValueError for degenerate projections (two or more singular
    values below 1e-12), where the nearest rotation is not unique.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries in projection input")
    if np.max(np.abs(m.T @ m - np.eye(3))) < 1e-12 and np.linalg.det(m) > 0.0:
        return m
    u, s, vt = np.linalg.svd(m)
    if int(np.sum(s < 1e-12)) >= 2:
        raise ValueError("degenerate projection: input is rank-deficient")
    d = np.linalg.det(u @ vt)
    return (u * np.array([1.0, 1.0, d])) @ vt


def geodesic_angle(r1: np.ndarray, r2: np.ndarray) -> float:
    """Rotation angle of r1^T r2, in radians, clamped to [0, pi]."""
    tr = float(np.trace(np.asarray(r1).T @ np.asarray(r2)))
    return math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: rotation (3x3) plus translation (3,), in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64)
        return SE3Pose(m[:3, :3].copy(), m[:3, 3].copy())

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Group product a . b (apply b first, then a)."""
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: SE3Pose) -> SE3Pose:
    rt = a.rotation.T
    return SE3Pose(rt.copy(), -(rt @ a.translation))


def relative_pose(abs_prev: SE3Pose, abs_curr: SE3Pose) -> SE3Pose:
    """Transform taking the previous frame to the current one."""
    return se3_compose(se3_inverse(abs_prev), abs_curr)


def accumulate(rel: list[SE3Pose], origin: SE3Pose) -> list[SE3Pose]:
    """Chain relative poses onto an origin: out[k] = origin . rel[0] ... rel[k]."""
    out: list[SE3Pose] = []
    cur = origin
    for step in rel:
        cur = se3_compose(cur, step)
        out.append(cur)
    return out
