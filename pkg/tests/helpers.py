"""Shared test helpers: pose perturbations, keyframes, finite-difference Jacobians."""

import math

import numpy as np

from edgevo.geometry import Pose, exp_map, log_map, rotation_angle, so3_exp
from edgevo.imageops import InverseDepthMap
from edgevo.tracking import KeyframeState, TrackerConfig, build_system


def rel_pose(poses_wc, i, j):
    """Pose mapping frame-i camera coordinates into frame-j coordinates."""
    return poses_wc[j].inverse() @ poses_wc[i]


def axis_rotation(axis, angle_deg):
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * math.radians(angle_deg))


def pose_errors(pa, pb):
    """(translation distance, rotation angle in degrees) between two poses."""
    dt = float(np.linalg.norm(pa.t - pb.t))
    da = math.degrees(rotation_angle(pa.R.T @ pb.R))
    return dt, da


def perturbed_init(rel, axis, angle_deg, trans_scale=1.0, trans_offset=None):
    """Twist of a pose whose rotation/translation deviate from `rel`."""
    t = rel.t * trans_scale
    if trans_offset is not None:
        t = t + np.asarray(trans_offset, dtype=float)
    return log_map(Pose(axis_rotation(axis, angle_deg) @ rel.R, t))


def interior_keyframe(frame, K, margin=24, stride=1, grad_threshold=3.0,
                      photometric_on_edges=False):
    """Keyframe whose depth support keeps `margin` px off every border.

    With the support away from the borders, small pose perturbations cannot
    push warped points out of the image, so the residual row set stays fixed
    under finite-difference sweeps.  `stride` thins the non-edge pixels to
    keep those sweeps cheap; edge pixels stay dense so geometric rows survive.
    """
    mean = frame.gt_depth.mean.copy()
    h, w = mean.shape
    keep = np.zeros_like(mean, dtype=bool)
    keep[margin:h - margin:stride, margin:w - margin:stride] = True
    for seg in frame.gt_edges:
        for u, v in seg.pixels:
            if margin <= v < h - margin and margin <= u < w - margin:
                keep[v, u] = True
    mean[~keep] = np.nan
    var = np.where(np.isfinite(mean), 1e-4, np.nan)
    return KeyframeState.assemble(frame.image, InverseDepthMap(mean, var),
                                  frame.gt_edges, K, grad_threshold=grad_threshold,
                                  photometric_on_edges=photometric_on_edges)


def warped_photometric_uv(kf, xi):
    """Warped image coordinates of the photometric pixel set, in row order.

    Mirrors the row-major np.nonzero ordering the residual builder uses.
    """
    omega = kf.high_gradient_mask & kf.depth.defined_mask()
    vv, uu = np.nonzero(omega)
    d = kf.depth.mean[vv, uu]
    K = kf.intrinsics
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy,
                     np.ones(uu.shape)], axis=1)
    T = exp_map(np.asarray(xi, dtype=float))
    X = (rays / d[:, None]) @ T.R.T + T.t
    return np.stack([K.fx * X[:, 0] / X[:, 2] + K.cx,
                     K.fy * X[:, 1] / X[:, 2] + K.cy], axis=1)


def fd_jacobian(kf, cur_image, cur_edges, matches, xi, config=None, h=1e-6,
                kink_tol=1e-3):
    """Analytic system plus central-difference Jacobian under left increments.

    Returns (system, J_fd, keep_rows).  Photometric rows whose warped point
    sits within `kink_tol` px of an integer grid line are masked out: the
    bilinear interpolant is only piecewise smooth, so central differences
    straddle a derivative jump there and disagree with the analytic gradient
    through no fault of either side.
    """
    config = config or TrackerConfig()
    base = build_system(kf, cur_image, cur_edges, matches, xi, config)
    uv = warped_photometric_uv(kf, xi)
    if base.n_photometric != uv.shape[0]:
        raise AssertionError(f"photometric rows dropped under the margin "
                             f"keyframe: {base.n_photometric} != {uv.shape[0]}")
    frac = uv - np.floor(uv)
    near_kink = np.minimum(frac, 1.0 - frac).min(axis=1) < kink_tol
    keep = np.ones(base.residuals.shape[0], dtype=bool)
    keep[:base.n_photometric] = ~near_kink

    T = exp_map(np.asarray(xi, dtype=float))
    J_fd = np.empty((base.residuals.shape[0], 6))
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = h
        rp = build_system(kf, cur_image, cur_edges, matches,
                          log_map(exp_map(delta) @ T), config).residuals
        rm = build_system(kf, cur_image, cur_edges, matches,
                          log_map(exp_map(-delta) @ T), config).residuals
        if rp.shape != base.residuals.shape or rm.shape != base.residuals.shape:
            raise AssertionError("residual row set changed under FD perturbation")
        J_fd[:, k] = (rp - rm) / (2.0 * h)
    return base, J_fd, keep


def jacobian_max_rel_err(system, J_fd, keep):
    scale = np.maximum(1.0, np.maximum(np.abs(system.jacobian), np.abs(J_fd)))
    return float((np.abs(system.jacobian - J_fd) / scale)[keep].max())
