"""SO(3)/SE(3) helpers for 6-vector poses.

A pose is a length-6 float array ``(wx, wy, wz, tx, ty, tz)``: a Rodrigues
rotation vector in radians followed by a translation in mm.  Rotations are
kept on the canonical branch ``||w|| < pi``.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError, SingularityError

# Below this angle exp/log switch to Taylor series.
SMALL_ANGLE = 1e-4
# Derivative coefficients cancel more aggressively; they get their own cut.
SMALL_ANGLE_DERIV = 1e-2
# Relative rotations closer than this to pi are rejected.
PI_MARGIN = 1e-6


def as_pose(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape != (6,):
        raise InvalidArgumentError(f"pose must have 6 components, got {theta.shape[0]}")
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("pose contains non-finite values")
    if np.linalg.norm(theta[:3]) >= math.pi:
        raise InvalidArgumentError("rotation vector norm must be < pi")
    return theta


def parse_pose(text: str) -> np.ndarray:
    """Parse ``wx,wy,wz,tx,ty,tz`` (radians, mm)."""
    parts = text.split(",")
    if len(parts) != 6:
        raise InvalidArgumentError(f"expected 6 comma-separated values, got {len(parts)}")
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad pose string {text!r}") from exc
    return as_pose(values)


def format_pose(theta) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(theta, dtype=float).reshape(-1))


def skew(v) -> np.ndarray:
    """Hat operator: 3-vector to skew-symmetric matrix."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def _exp_coeffs(angle: float) -> tuple[float, float]:
    # sin(a)/a and (1-cos(a))/a^2
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        return 1.0 - a2 / 6.0 + a2 * a2 / 120.0, 0.5 - a2 / 24.0 + a2 * a2 / 720.0
    return math.sin(angle) / angle, (1.0 - math.cos(angle)) / (angle * angle)


def _deriv_coeffs(angle: float) -> tuple[float, float, float]:
    """Coefficients (dA/da)/a, (dB/da)/a and (a - sin a)/a^3."""
    a2 = angle * angle
    if angle < SMALL_ANGLE_DERIV:
        ca = -1.0 / 3.0 + a2 / 30.0 - a2 * a2 / 840.0
        cb = -1.0 / 12.0 + a2 / 180.0 - a2 * a2 / 6720.0
        cc = 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0
        return ca, cb, cc
    s, c = math.sin(angle), math.cos(angle)
    ca = (angle * c - s) / (a2 * angle)
    cb = (angle * s - 2.0 * (1.0 - c)) / (a2 * a2)
    cc = (angle - s) / (a2 * angle)
    return ca, cb, cc


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula: rotation vector to rotation matrix."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    if not np.all(np.isfinite(omega)):
        raise InvalidArgumentError("rotation vector contains non-finite values")
    A, B = _exp_coeffs(float(np.linalg.norm(omega)))
    K = skew(omega)
    return np.eye(3) + A * K + B * (K @ K)


def log_so3(R) -> np.ndarray:
    """Inverse of :func:`exp_so3` on the branch ``||w|| < pi``."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidArgumentError("expected a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or np.linalg.det(R) < 0:
        raise InvalidArgumentError("matrix is not a proper rotation")
    w = 0.5 * vee(R - R.T)
    s = float(np.linalg.norm(w))
    c = 0.5 * (np.trace(R) - 1.0)
    angle = math.atan2(s, c)
    if angle > math.pi - PI_MARGIN:
        raise SingularityError(f"rotation angle {angle!r} too close to pi")
    if angle < SMALL_ANGLE:
        a2 = angle * angle
        return w * (1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0)
    if angle < 2.5:
        return w * (angle / s)
    # Near pi the antisymmetric part is small; take the axis from the
    # symmetric part and the sign from w.
    S = 0.5 * (R + R.T) - c * np.eye(3)
    col = int(np.argmax(np.diag(S)))
    axis = S[:, col] / math.sqrt(S[col, col] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return angle * axis


def so3_derivatives(omega) -> np.ndarray:
    """Partial derivatives of :func:`exp_so3`, shape (3, 3, 3); ``[i]`` is dR/dw_i."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    angle = float(np.linalg.norm(omega))
    A, B = _exp_coeffs(angle)
    ca, cb, _ = _deriv_coeffs(angle)
    K = skew(omega)
    K2 = K @ K
    out = np.empty((3, 3, 3))
    for i in range(3):
        E = skew(np.eye(3)[i])
        out[i] = ca * omega[i] * K + A * E + cb * omega[i] * K2 + B * (E @ K + K @ E)
    return out


def right_jacobian(omega) -> np.ndarray:
    """Right Jacobian of SO(3): ``exp(w + d) ~ exp(w) exp(Jr d)``."""
    omega = np.asarray(omega, dtype=float).reshape(3)
    angle = float(np.linalg.norm(omega))
    _, B = _exp_coeffs(angle)
    _, _, C = _deriv_coeffs(angle)
    K = skew(omega)
    return np.eye(3) - B * K + C * (K @ K)


def pose_to_matrix(theta, half_extent=1.0) -> np.ndarray:
    """4x4 transform acting on normalised volume coordinates.

    The translation (mm) is divided per axis by ``half_extent`` (mm), the
    half size of the volume, so that it lives in the same [-1, 1] frame as
    the control points.
    """
    theta = as_pose(theta)
    T = np.eye(4)
    T[:3, :3] = exp_so3(theta[:3])
    T[:3, 3] = theta[3:] / np.broadcast_to(np.asarray(half_extent, dtype=float), (3,))
    return T


def relative_rotation(theta, theta_t) -> np.ndarray:
    """Rodrigues vector of ``R(theta)^T R(theta_t)``."""
    R = exp_so3(theta[:3])
    Rt = exp_so3(theta_t[:3])
    return log_so3(R.T @ Rt)


def geodesic_loss(theta, theta_t, trans_weight: float = 1.0, trans_scale: float = 1.0) -> float:
    """Squared distance under the product metric on SO(3) x R^3.

    Translations are divided by ``trans_scale`` before squaring, so the
    default compares them in the units they are given in.
    """
    theta, theta_t = as_pose(theta), as_pose(theta_t)
    phi = relative_rotation(theta, theta_t)
    dt = (theta[3:] - theta_t[3:]) / trans_scale
    return float(phi @ phi + trans_weight * (dt @ dt))


def geodesic_grad(theta, theta_t, trans_weight: float = 1.0, trans_scale: float = 1.0) -> np.ndarray:
    """Gradient of :func:`geodesic_loss` with respect to ``theta``."""
    theta, theta_t = as_pose(theta), as_pose(theta_t)
    phi = relative_rotation(theta, theta_t)
    grad = np.empty(6)
    # d||log(R^T Rt)||^2 = -2 phi^T Jr(w) dw, since phi^T Jl^{-1}(phi) = phi^T
    grad[:3] = -2.0 * right_jacobian(theta[:3]).T @ phi
    grad[3:] = 2.0 * trans_weight * (theta[3:] - theta_t[3:]) / trans_scale**2
    return grad


def sample_pose(sigma_rot_deg: float, sigma_trans_mm: float, rng: np.random.Generator) -> np.ndarray:
    """Draw a pose with i.i.d. Gaussian components.

    Rotation components are drawn in degrees and converted to radians;
    draws landing too close to the pi branch cut are redrawn.
    """
    if sigma_rot_deg < 0 or sigma_trans_mm < 0:
        raise InvalidArgumentError("sigmas must be non-negative")
    while True:
        omega = np.deg2rad(rng.normal(0.0, sigma_rot_deg, size=3))
        t = rng.normal(0.0, sigma_trans_mm, size=3)
        if np.linalg.norm(omega) < math.pi * (1.0 - 1e-3):
            return np.concatenate([omega, t])
