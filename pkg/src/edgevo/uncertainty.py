"""First-order covariance propagation for edge-based residual weighting.

Covers line-coefficient covariance from endpoint noise, per-pixel edge
reprojection variance, disparity variance of line-guided stereo matching,
and its conversion to inverse-depth observation variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateIntersection, DegenerateLine, NoParallax
from .geometry import CameraIntrinsics, Pose

VARIANCE_FLOOR = 1e-6
# below this angle an edge and the epipolar line count as parallel
PARALLEL_ANGLE = math.radians(5.0)


@dataclass(frozen=True)
class ObservationVariances:
    """Residual variances: photometric, geometric (per pixel), inverse depth."""

    sigma_r2: float = 4.0
    sigma_g2: float = 1.0
    sigma_d2: float = 1.0

    def __post_init__(self):
        if self.sigma_r2 <= 0 or self.sigma_g2 <= 0 or self.sigma_d2 <= 0:
            raise ValueError("variances must be positive")


def propagate(J: np.ndarray, Sigma_in: np.ndarray) -> np.ndarray:
    """First-order covariance transport J @ Sigma @ J.T, symmetrized."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    Sigma_in = np.atleast_2d(np.asarray(Sigma_in, dtype=float))
    if J.shape[1] != Sigma_in.shape[0] or Sigma_in.shape[0] != Sigma_in.shape[1]:
        raise ValueError(f"dimension mismatch: J {J.shape} vs Sigma {Sigma_in.shape}")
    out = J @ Sigma_in @ J.T
    return 0.5 * (out + out.T)


def line_coefficient_covariance(p1, p2, sigma_endpoint: float = 1.0) -> np.ndarray:
    """Covariance of normalized line coefficients from noisy endpoints.

    Each endpoint carries isotropic covariance sigma^2 I_2. The raw
    coefficients are the cross product of homogeneous endpoints; the
    result is propagated through the (a, b) unit normalization, so the
    returned 3x3 covariance weights signed point-line distances directly.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    diff = p2 - p1
    if float(np.hypot(*diff)) < 1e-9:
        raise DegenerateLine(f"coincident endpoints {p1} and {p2}")

    u1, v1 = p1
    u2, v2 = p2
    raw = np.cross(np.array([u1, v1, 1.0]), np.array([u2, v2, 1.0]))
    # d(raw)/d(u1,v1) and d(raw)/d(u2,v2)
    J1 = np.array([[0.0, 1.0], [-1.0, 0.0], [v2, -u2]])
    J2 = np.array([[0.0, -1.0], [1.0, 0.0], [-v1, u1]])

    s = math.hypot(raw[0], raw[1])
    if s < 1e-12:
        raise DegenerateLine("zero normal from cross product")
    # normalization l/s with s = hypot(a, b)
    Jn = np.eye(3) / s - np.outer(raw, [raw[0], raw[1], 0.0]) / s**3

    var = sigma_endpoint**2
    Sigma_raw = var * (J1 @ J1.T + J2 @ J2.T)
    return propagate(Jn, Sigma_raw)


def line_distance_variance(Sigma_l: np.ndarray, x) -> float:
    """Variance of the signed distance l^T xhat from line-coefficient noise."""
    x = np.asarray(x, dtype=float)
    xh = np.array([x[0], x[1], 1.0])
    return float(xh @ np.asarray(Sigma_l, dtype=float) @ xh)


def reprojection_variance(line, Sigma_l, x_warped, Sigma_x) -> float:
    """Variance of the edge reprojection residual l^T xhat'.

    Sums the point-position term (a,b) Sigma_x (a,b)^T and the
    line-coefficient term xhat'^T Sigma_l xhat' with xhat' = (u, v, 1),
    floored at VARIANCE_FLOOR.
    """
    line = np.asarray(line, dtype=float)
    ab = line[:2]
    point_term = float(ab @ np.asarray(Sigma_x, dtype=float) @ ab)
    line_term = line_distance_variance(Sigma_l, x_warped)
    return max(point_term + line_term, VARIANCE_FLOOR)


def disparity_variance(sigma_l2: float, sigma_g2_line: float, theta: float) -> float:
    """Disparity variance of the epipolar-edge intersection.

    sigma_l2 is the matched edge's positioning variance, sigma_g2_line the
    epipolar line's. Diverges as theta approaches 0 or pi; symmetric under
    theta -> pi - theta.
    """
    if not 0.0 < theta < math.pi:
        raise ValueError(f"theta must lie in (0, pi), got {theta}")
    if min(theta, math.pi - theta) < PARALLEL_ANGLE:
        raise DegenerateIntersection(
            f"lines nearly parallel: theta = {math.degrees(theta):.3f} deg")
    s = math.sin(theta)
    c = math.cos(theta)
    return sigma_l2 / s**2 + sigma_g2_line * (c / s) ** 2


def disparity_to_inverse_depth_gain(K: CameraIntrinsics, pose: Pose, x_ref,
                                    d: float) -> float:
    """Local proportionality constant c with sigma_d = c * sigma_lambda.

    The warped pixel traces the epipolar line as inverse depth varies;
    c is the reciprocal of that curve's speed |d x' / d d| at d.
    """
    t = pose.t
    if float(np.linalg.norm(t)) < 1e-9:
        raise NoParallax("zero baseline")
    Km = K.matrix()
    xh = np.array([x_ref[0], x_ref[1], 1.0])
    A = Km @ pose.R @ np.linalg.solve(Km, xh)
    B = Km @ t
    denom = A[2] + d * B[2]
    if abs(denom) < 1e-12:
        raise NoParallax("warped point at infinity")
    speed = math.hypot(B[0] * A[2] - B[2] * A[0],
                       B[1] * A[2] - B[2] * A[1]) / denom**2
    if speed < 1e-15:
        raise NoParallax("epipolar speed vanishes at this pixel")
    return 1.0 / speed


def inverse_depth_obs_variance(sigma_lambda2: float, K: CameraIntrinsics,
                               pose: Pose, x_ref, d: float) -> float:
    """Observation variance of inverse depth: c^2 * sigma_lambda^2."""
    c = disparity_to_inverse_depth_gain(K, pose, x_ref, d)
    return c**2 * sigma_lambda2
