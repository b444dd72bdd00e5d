"""Regularized projective manifold gradient (RPMG) for rotation learning.

The naive gradient of a rotation loss treats the 9 matrix entries as free
parameters. This layer replaces it: project the raw prediction onto SO(3),
take a Riemannian descent step of size tau toward a goal rotation, map the
goal back to the nearest point of the prediction's representation space
(the fiber of matrices that orthogonalize to the goal), and regularize the
raw prediction toward the goal with weight lambda. The returned matrix is
used in place of dL/dx in backpropagation.

All functions are pure; see `geometry` for conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import so3_exp, svd_orthogonalize, vee

_NORMS = ("L1", "L2")


@dataclass(frozen=True)
class RpmgParams:
    """tau: Riemannian step size; lam: regularization weight toward the goal."""

    tau: float = 0.25
    lam: float = 0.01

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0.0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")


def riemannian_grad(r: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Project a Euclidean gradient g onto the tangent space at rotation r.

    Returns the skew part of r^T g, i.e. A = (r^T g - g^T r) / 2. The
    tangent direction at r is then r @ A.
    """
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return (r.T @ g - g.T @ r) / 2.0


def goal_rotation(r: np.ndarray, a: np.ndarray, params: RpmgParams) -> np.ndarray:
    """Riemannian descent step: r_g = r . exp(-tau * vee(a)) for skew a."""
    a = np.asarray(a, dtype=np.float64)
    if np.max(np.abs(a + a.T)) > 1e-10:
        raise ValueError("tangent input is not skew-symmetric")
    return np.asarray(r, dtype=np.float64) @ so3_exp(-params.tau * vee(a))


def fiber_nearest(x: np.ndarray, r_g: np.ndarray) -> np.ndarray:
    """Nearest element of r_g's fiber to x.

    The fiber of r_g under SVD orthogonalization is {r_g @ S : S symmetric
    PSD}; minimizing ||r_g S - x||_F reduces to the nearest-PSD problem for
    sym(r_g^T x), solved by clamping negative eigenvalues to zero. When x is
    already on the fiber with S within roundoff of the identity, x itself is
    returned so fixed points are exact.
    """
    x = np.asarray(x, dtype=np.float64)
    r_g = np.asarray(r_g, dtype=np.float64)
    b = r_g.T @ x
    s = (b + b.T) / 2.0
    if np.max(np.abs(s - np.eye(3))) < 1e-12:
        return x
    w, v = np.linalg.eigh(s)
    w = np.clip(w, 0.0, None)
    return r_g @ ((v * w) @ v.T)


def rotation_loss_grad(r: np.ndarray, r_gt: np.ndarray, norm: str) -> np.ndarray:
    """d/dR of the mean elementwise difference between r and r_gt."""
    if norm not in _NORMS:
        raise ValueError(f"norm must be one of {_NORMS}, got {norm!r}")
    diff = np.asarray(r, dtype=np.float64) - np.asarray(r_gt, dtype=np.float64)
    if norm == "L1":
        return np.sign(diff) / 9.0
    return 2.0 * diff / 9.0


def rpmg_grad(
    x: np.ndarray, r_gt: np.ndarray, params: RpmgParams, norm: str = "L1"
) -> np.ndarray:
    """Manifold-aware replacement for the gradient of the rotation loss at x.

    Pipeline: r = orthogonalize(x); g = d(mean elementwise loss)/dr;
    A = tangent projection of g at r; r_g = goal rotation; x_g = nearest
    fiber element of r_g to x; return (x - x_g) + lam * (x - r_g).

    Exactly zero when x is on SO(3) and equals r_gt.
    """
    x = np.asarray(x, dtype=np.float64)
    r = svd_orthogonalize(x)
    g = rotation_loss_grad(r, r_gt, norm)
    a = riemannian_grad(r, g)
    r_g = goal_rotation(r, a, params)
    x_g = fiber_nearest(x, r_g)
    return (x - x_g) + params.lam * (x - r_g)


def euler_jacobian(e: np.ndarray) -> np.ndarray:
    """Analytic 9x3 Jacobian of euler_to_matrix at e, rows in row-major
    order of the rotation matrix, columns [roll, pitch, yaw]."""
    roll, pitch, yaw = np.asarray(e, dtype=np.float64).reshape(3)
    ca, sa = math.cos(roll), math.sin(roll)
    cb, sb = math.cos(pitch), math.sin(pitch)
    cc, sc = math.cos(yaw), math.sin(yaw)

    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]], dtype=np.float64)
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]], dtype=np.float64)
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]], dtype=np.float64)
    drx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]], dtype=np.float64)
    dry = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]], dtype=np.float64)
    drz = np.array([[-sc, -cc, 0], [cc, -sc, 0], [0, 0, 0]], dtype=np.float64)

    jac = np.empty((9, 3), dtype=np.float64)
    jac[:, 0] = (rz @ ry @ drx).reshape(9)
    jac[:, 1] = (rz @ dry @ rx).reshape(9)
    jac[:, 2] = (drz @ ry @ rx).reshape(9)
    return jac


def chain_through_euler(e: np.ndarray, grad_x: np.ndarray) -> np.ndarray:
    """Pull a 3x3 rotation-matrix gradient back to Euler angles: J^T vec(grad)."""
    return euler_jacobian(e).T @ np.asarray(grad_x, dtype=np.float64).reshape(9)


__all__ = [
    "RpmgParams",
    "riemannian_grad",
    "goal_rotation",
    "fiber_nearest",
    "rotation_loss_grad",
    "rpmg_grad",
    "euler_jacobian",
    "chain_through_euler",
]
