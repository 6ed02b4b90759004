"""SE(3)/so(3) algebra, pinhole camera model, and 2D/3D line primitives.

Twists are plain (6,) arrays ordered (tx, ty, tz, wx, wy, wz); pixel points
are (2,) arrays (u, v); homogeneous 2D lines are (3,) arrays (a, b, c)
normalized so a**2 + b**2 == 1.

Convention: a twist / Pose maps reference-frame coordinates into the
current frame, X_cur = R @ X_ref + t. `warp` therefore takes a keyframe
pixel into the current image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AmbiguousLog,
    BehindCamera,
    DegenerateLine,
    InvalidDepth,
)

SMALL_ANGLE = 1e-8


def skew(w: np.ndarray) -> np.ndarray:
    """[w]x such that skew(w) @ v == cross(w, v)."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula with a Taylor branch below SMALL_ANGLE."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        # exp([w]x) ~ I + [w]x + [w]x^2/2
        return np.eye(3) + W + 0.5 * (W @ W)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix; AmbiguousLog near 180 deg."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= np.pi - 1e-6:
        raise AmbiguousLog(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        # vee(R - R^T)/2 is exact to O(theta^3)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    factor = theta / (2.0 * np.sin(theta))
    return factor * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


def _se3_V(w: np.ndarray) -> np.ndarray:
    """Left Jacobian coupling translation and rotation in the SE(3) exp."""
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * W + b * (W @ W)


def _se3_V_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    half = 0.5 * theta
    # 1/theta^2 * (1 - theta*sin/(2*(1-cos))) == (1 - half*cot(half))/theta^2
    coeff = (1.0 - half * np.cos(half) / np.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: X_out = rotation @ X_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return self.rotation

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose(T[:3, :3].copy(), T[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self @ other)(X) = self(other(X))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        """Apply to a (3,) point or (..., 3) array of points."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.rotation.T + self.translation

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))))


def exp_map(xi: np.ndarray) -> Pose:
    """SE(3) exponential of a twist (t; w)."""
    xi = np.asarray(xi, dtype=float)
    t, w = xi[:3], xi[3:]
    R = so3_exp(w)
    return Pose(R, _se3_V(w) @ t)


def log_map(T: Pose) -> np.ndarray:
    """Inverse of exp_map; AmbiguousLog for rotation angles >= pi - 1e-6."""
    w = so3_log(T.rotation)
    t = _se3_V_inv(w) @ T.translation
    return np.concatenate([t, w])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics of the next pyramid level (2x2 block-mean downsampling).

        Pixel centers sit at integers, so the coarse pixel (i, j) covers fine
        pixels 2i..2i+1: u_coarse = (u_fine - 0.5) / 2.
        """
        return CameraIntrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=(self.cx - 0.5) / 2.0,
            cy=(self.cy - 0.5) / 2.0,
            width=self.width // 2,
            height=self.height // 2,
        )


def project(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """Pinhole projection of a camera-frame 3D point; BehindCamera if Z <= 1e-9."""
    X = np.asarray(X, dtype=float)
    if X[2] <= 1e-9:
        raise BehindCamera(f"Z = {X[2]}")
    return np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy])


def project_batch(K: CameraIntrinsics, X: np.ndarray):
    """Vectorized projection: (N, 3) -> ((N, 2) pixels, (N,) valid mask)."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / zs + K.cx, K.fy * X[..., 1] / zs + K.cy], axis=-1)
    return uv, valid


def backproject(K: CameraIntrinsics, x: np.ndarray, inv_depth: float) -> np.ndarray:
    """Pixel + inverse depth -> camera-frame 3D point with Z = 1/inv_depth."""
    if inv_depth <= 0:
        raise InvalidDepth(f"inverse depth {inv_depth} <= 0")
    z = 1.0 / inv_depth
    return np.array([(x[0] - K.cx) / K.fx * z, (x[1] - K.cy) / K.fy * z, z])


def pixel_rays(K: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Unit-depth rays ((u-cx)/fx, (v-cy)/fy, 1) for (..., 2) pixels."""
    uv = np.asarray(uv, dtype=float)
    return np.stack([
        (uv[..., 0] - K.cx) / K.fx,
        (uv[..., 1] - K.cy) / K.fy,
        np.ones(uv.shape[:-1]),
    ], axis=-1)


def warp(K: CameraIntrinsics, x: np.ndarray, inv_depth: float, xi: np.ndarray) -> np.ndarray:
    """Back-project, rigidly transform by exp(xi), re-project.

    warp(K, x, d, 0) == x; BehindCamera propagates from the projection.
    """
    return warp_pose(K, x, inv_depth, exp_map(np.asarray(xi, dtype=float)))


def warp_pose(K: CameraIntrinsics, x: np.ndarray, inv_depth: float, pose: Pose) -> np.ndarray:
    return project(K, pose.transform(backproject(K, x, inv_depth)))


def line_from_endpoints(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Homogeneous line through two pixels, normalized to a^2 + b^2 = 1."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if np.linalg.norm(p2 - p1) < 1e-9:
        raise DegenerateLine("coincident endpoints")
    l = np.cross(np.array([p1[0], p1[1], 1.0]), np.array([p2[0], p2[1], 1.0]))
    return normalize_line(l)


def normalize_line(l: np.ndarray) -> np.ndarray:
    l = np.asarray(l, dtype=float)
    s = np.hypot(l[0], l[1])
    if s < 1e-12:
        raise DegenerateLine("line with zero (a, b)")
    return l / s


def point_line_signed_distance(l: np.ndarray, x: np.ndarray) -> float:
    """a*u + b*v + c for a normalized line: signed distance in pixels."""
    return float(l[0] * x[0] + l[1] * x[1] + l[2])


@dataclass(frozen=True)
class Plane3D:
    """Plane n . X + d = 0 with unit normal."""

    normal: np.ndarray
    offset: float

    @staticmethod
    def from_normal_offset(n: np.ndarray, d: float) -> "Plane3D":
        n = np.asarray(n, dtype=float)
        s = np.linalg.norm(n)
        if s < 1e-12:
            raise ValueError("zero plane normal")
        return Plane3D(n / s, float(d) / s)

    def signed_distance(self, X: np.ndarray) -> float:
        return float(np.dot(self.normal, X) + self.offset)


@dataclass(frozen=True)
class Line3D:
    """3D line as a point plus a unit direction."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("zero line direction")
        object.__setattr__(self, "direction", d / n)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def distance_to(self, X: np.ndarray) -> float:
        r = np.asarray(X, dtype=float) - self.point
        return float(np.linalg.norm(r - np.dot(r, self.direction) * self.direction))
