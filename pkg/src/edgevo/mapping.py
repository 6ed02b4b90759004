"""Keyframe inverse-depth map update.

Stage 1 matches every semi-dense keyframe pixel in the current frame
(line-guided epipolar-edge intersection where a matched edge exists,
exhaustive SSD search otherwise), converts matches to inverse-depth
observations with propagated variance, and fuses them per pixel with an
EKF. Stage 2 fits a 3D line per matched edge on the back-projection plane
(RANSAC with Mahalanobis gating, closed-form weighted fit) and snaps
inlier depths onto it.

All 3D quantities live in the keyframe camera frame; `pose` maps keyframe
coordinates into the current frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (DegenerateIntersection, DegenerateLine, DegenerateTriangulation,
                     InvalidDepth, InvalidVariance, NoConsensus, NoParallax,
                     SearchOutOfBounds, TooFewPoints)
from .geometry import (CameraIntrinsics, Line3D, Pose, line_from_endpoints,
                       normalize_line)
from .imageops import InverseDepthMap, bilinear_sample
from .uncertainty import (PARALLEL_ANGLE, VARIANCE_FLOOR,
                          line_coefficient_covariance)


@dataclass(frozen=True)
class DepthHypothesis:
    """Gaussian inverse-depth belief for one pixel."""

    mean: float
    variance: float

    def __post_init__(self):
        if self.mean <= 0:
            raise InvalidDepth(f"inverse depth {self.mean} <= 0")
        if self.variance <= 0:
            raise InvalidVariance(f"variance {self.variance} <= 0")


@dataclass(frozen=True)
class EpipolarLine:
    """Normalized epipolar line plus the unit pixel direction of increasing
    inverse depth."""

    line: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class PlaneFrame:
    """2D chart of a back-projection plane through the camera center."""

    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray

    def to_plane(self, X: np.ndarray) -> np.ndarray:
        """(…, 3) camera points -> (…, 2) in-plane coordinates (projected)."""
        rel = np.asarray(X, dtype=float) - self.origin
        return np.stack([rel @ self.x_axis, rel @ self.y_axis], axis=-1)

    def to_camera(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return self.origin + p[..., :1] * self.x_axis + p[..., 1:2] * self.y_axis


@dataclass(frozen=True)
class WeightedPoint2:
    p: np.ndarray
    cov: np.ndarray


@dataclass
class StereoMatch:
    uv: np.ndarray
    d_obs: float
    score: float
    ambiguous: bool


@dataclass(frozen=True)
class MappingConfig:
    patch_radius: int = 2
    n_search_samples: int = 21
    n_search_samples_short: int = 9  # for arcs below short_window_px
    short_window_px: float = 6.0
    max_arc_px: float = 24.0
    min_window_px: float = 0.35     # skip pixels whose search arc shrank below
    match_sigma_px2: float = 0.25   # subpixel SSD matching variance
    epipolar_sigma2: float = 1.0    # positioning variance of the epipolar line
    endpoint_sigma: float = 1.0     # detected-edge endpoint noise, px
    on_line_tol: float = 0.5        # max ref-line offset for line-guided pixels
    ssd_ratio: float = 1.5
    min_peak_separation_px: float = 2.0
    max_ssd_per_px: float = 16.0    # absolute match-quality gate
    min_grad_epi_dot2: float = 0.0076  # sin^2(5 deg), caps aperture inflation
    d_min: float = 1e-3
    d_max: float = 1e3
    ransac_iterations: int = 100
    ransac_chi2: float = 5.99       # chi-square, 2 dof, 95%
    min_consensus: float = 0.5
    min_points: int = 4
    pixel_sigma: float = 0.5        # raster-position noise entering the plane fit
    snap_gate_sigmas: float = 3.0   # reject line snaps this far from the prior
    update_gradient_pixels: bool = True
    regularize: bool = True
    seed: int = 0


@dataclass
class MappingStats:
    line_guided: int = 0
    exhaustive: int = 0
    fused: int = 0
    no_parallax: int = 0
    out_of_bounds: int = 0
    ambiguous: int = 0
    converged: int = 0
    invalid_obs: int = 0
    degenerate_line_guided: int = 0
    regularized_edges: int = 0
    regularization_failures: int = 0
    notes: list = field(default_factory=list)


def _homogeneous_params(K: CameraIntrinsics, pose: Pose, uv: np.ndarray):
    """Pixel path x'(d) ~ A + d B in homogeneous pixel coordinates.

    uv is (..., 2); A is (..., 3), B is (3,).
    """
    uv = np.asarray(uv, dtype=float)
    Km = K.matrix()
    rays = np.stack([(uv[..., 0] - K.cx) / K.fx,
                     (uv[..., 1] - K.cy) / K.fy,
                     np.ones(uv.shape[:-1])], axis=-1)
    A = rays @ pose.R.T @ Km.T
    B = Km @ pose.t
    return A, B


def epipolar_line(K: CameraIntrinsics, pose: Pose, x_ref) -> EpipolarLine:
    """Epipolar line of a keyframe pixel in the current image."""
    if float(np.linalg.norm(pose.t)) < 1e-9:
        raise NoParallax("zero baseline")
    A, B = _homogeneous_params(K, pose, np.asarray(x_ref, dtype=float))
    raw = np.cross(A, B)
    try:
        line = normalize_line(raw)
    except Exception:
        raise NoParallax("pixel coincides with the epipole") from None
    dvec = np.array([B[0] * A[2] - B[2] * A[0], B[1] * A[2] - B[2] * A[1]])
    n = float(np.hypot(*dvec))
    if n < 1e-12:
        raise NoParallax("epipolar direction vanishes at this pixel")
    return EpipolarLine(line=line, direction=dvec / n)


def inverse_depth_from_match(K: CameraIntrinsics, pose: Pose, x_ref, x_cur) -> float:
    """Invert the epipolar parameterization at a matched current-frame pixel."""
    A, B = _homogeneous_params(K, pose, np.asarray(x_ref, dtype=float))
    u, v = float(x_cur[0]), float(x_cur[1])
    # pick the better-conditioned image coordinate
    num_u = B[0] * A[2] - B[2] * A[0]
    num_v = B[1] * A[2] - B[2] * A[1]
    if max(abs(num_u), abs(num_v)) < 1e-12:
        raise NoParallax("no epipolar motion at this pixel")
    if abs(num_u) >= abs(num_v):
        d = (A[0] - u * A[2]) / (u * B[2] - B[0])
    else:
        d = (A[1] - v * A[2]) / (v * B[2] - B[1])
    if not np.isfinite(d) or d <= 0:
        raise InvalidDepth(f"matched point implies inverse depth {d}")
    return float(d)


def disparity_to_gain(K: CameraIntrinsics, pose: Pose, x_ref, d: float) -> float:
    """Pixel-disparity to inverse-depth factor c at inverse depth d."""
    A, B = _homogeneous_params(K, pose, np.asarray(x_ref, dtype=float))
    speed = math.hypot(B[0] * A[2] - B[2] * A[0],
                       B[1] * A[2] - B[2] * A[1]) / (A[2] + d * B[2]) ** 2
    if speed < 1e-15:
        raise NoParallax("epipolar speed vanishes")
    return 1.0 / speed


def line_guided_match(epi: EpipolarLine, matched_edge) -> np.ndarray:
    """Intersection of the epipolar line with a matched edge line."""
    l = np.asarray(matched_edge, dtype=float)
    theta = _line_angle(epi.line, l)
    if theta < PARALLEL_ANGLE:
        raise DegenerateIntersection(
            f"epipolar/edge angle {math.degrees(theta):.2f} deg below threshold")
    x = np.cross(epi.line, l)
    if abs(x[2]) < 1e-12:
        raise DegenerateIntersection("intersection at infinity")
    return x[:2] / x[2]


def _line_angle(l1, l2) -> float:
    """Angle between two normalized lines, in [0, pi/2]."""
    c = abs(float(l1[0] * l2[0] + l1[1] * l2[1]))
    return math.acos(min(c, 1.0))


def exhaustive_stereo_search(K: CameraIntrinsics, pose: Pose, kf_image, cur_image,
                             x_ref, hypothesis: DepthHypothesis,
                             patch_radius: int = 2,
                             config: MappingConfig = None) -> StereoMatch:
    """SSD search along the epipolar segment of d in [mean-2s, mean+2s]."""
    config = config or MappingConfig(patch_radius=patch_radius)
    if config.min_window_px > 0.0:
        config = replace(config, min_window_px=0.0)
    out = _batch_exhaustive(K, pose, np.asarray(kf_image, dtype=float),
                            np.asarray(cur_image, dtype=float),
                            np.asarray([x_ref], dtype=float),
                            np.array([hypothesis.mean]),
                            np.array([hypothesis.variance]), config)
    if out["oob"][0]:
        raise SearchOutOfBounds("entire search interval outside the image")
    return StereoMatch(uv=out["uv"][0], d_obs=float(out["d_obs"][0]),
                       score=float(out["score"][0]), ambiguous=bool(out["ambiguous"][0]))


def _batch_exhaustive(K, pose, kf_image, cur_image, xs, d, var, config: MappingConfig):
    """Vectorized epipolar SSD search for (N, 2) keyframe pixels."""
    N = xs.shape[0]
    A, B = _homogeneous_params(K, pose, xs)

    sigma = np.sqrt(np.maximum(var, 0.0))
    d_lo = np.maximum(d - 2.0 * sigma, config.d_min)
    d_hi = np.minimum(d + 2.0 * sigma, config.d_max)
    # keep the far end in front of the current camera
    if B[2] < 0:
        cap = -A[:, 2] / B[2] * 0.95
        d_hi = np.minimum(d_hi, np.maximum(cap, config.d_min))
        d_lo = np.minimum(d_lo, d_hi)

    den_lo = A[:, 2] + d_lo * B[2]
    den_hi = A[:, 2] + d_hi * B[2]
    den_lo = np.where(np.abs(den_lo) < 1e-12, 1e-12, den_lo)
    den_hi = np.where(np.abs(den_hi) < 1e-12, 1e-12, den_hi)
    p_lo = np.stack([(A[:, 0] + d_lo * B[0]) / den_lo,
                     (A[:, 1] + d_lo * B[1]) / den_lo], axis=-1)
    p_hi = np.stack([(A[:, 0] + d_hi * B[0]) / den_hi,
                     (A[:, 1] + d_hi * B[1]) / den_hi], axis=-1)
    seg = p_hi - p_lo
    L = np.hypot(seg[:, 0], seg[:, 1])

    out = {"uv": np.zeros((N, 2)), "d_obs": np.zeros(N),
           "score": np.full(N, np.inf), "ambiguous": np.zeros(N, dtype=bool),
           "oob": np.zeros(N, dtype=bool), "ok": np.zeros(N, dtype=bool),
           "skipped": L < config.min_window_px, "var_obs": np.full(N, np.inf)}

    # localization slides along near-parallel structure; the reference-image
    # gradient direction tells how well the epipolar direction is constrained
    gy, gx = np.gradient(np.asarray(kf_image, dtype=float))
    gxs, _ = bilinear_sample(gx, xs)
    gys, _ = bilinear_sample(gy, xs)

    # converged pixels (sub-sample search window) are skipped outright;
    # short arcs get a coarser sampling for throughput
    short = L < config.short_window_px
    buckets = [(np.nonzero(~out["skipped"] & short)[0], config.n_search_samples_short),
               (np.nonzero(~out["skipped"] & ~short)[0], config.n_search_samples)]
    for act, S in buckets:
        if len(act) == 0:
            continue
        _search_rows(out, act, S, A[act], B, xs[act], d[act],
                     p_lo[act], seg[act], L[act], gxs[act], gys[act],
                     kf_image, cur_image, config)
    return out


def _patch_samples(image, centers, r: int):
    """Bilinear (2r+1)^2 patches at float centers (..., 2).

    One integer window gather plus a shared-weight blend; the fractional
    offset is identical across a patch so per-offset bilinear would redo
    the same work (2r+1)^2 times.
    """
    H, W = image.shape
    c = np.asarray(centers, dtype=float)
    x0 = np.floor(c[..., 0]).astype(int)
    y0 = np.floor(c[..., 1]).astype(int)
    fx = (c[..., 0] - x0)[..., None, None]
    fy = (c[..., 1] - y0)[..., None, None]
    jj = np.arange(-r, r + 2)
    Y = y0[..., None] + jj
    X = x0[..., None] + jj
    vY = (Y >= 0) & (Y <= H - 1)
    vX = (X >= 0) & (X <= W - 1)
    win = image[np.clip(Y, 0, H - 1)[..., :, None],
                np.clip(X, 0, W - 1)[..., None, :]]
    vwin = vY[..., :, None] & vX[..., None, :]
    vals = (1 - fy) * ((1 - fx) * win[..., :-1, :-1] + fx * win[..., :-1, 1:]) \
        + fy * ((1 - fx) * win[..., 1:, :-1] + fx * win[..., 1:, 1:])
    valid = vwin[..., :-1, :-1] & vwin[..., :-1, 1:] \
        & vwin[..., 1:, :-1] & vwin[..., 1:, 1:]
    flat = vals.shape[:-2] + ((2 * r + 1) ** 2,)
    return vals.reshape(flat), valid.reshape(flat)


def _search_rows(out, act, S, A, B, xs, d, p_lo, seg, L, gxs, gys,
                 kf_image, cur_image, config: MappingConfig):
    """One SSD pass over `act` rows with S samples each, results into `out`."""
    n = len(act)

    # clamp overlong arcs to a window around the prior-mean projection
    t0 = np.zeros(n)
    t1 = np.ones(n)
    too_long = L > config.max_arc_px
    if np.any(too_long):
        den_c = A[:, 2] + d * B[2]
        den_c = np.where(np.abs(den_c) < 1e-12, 1e-12, den_c)
        pc = np.stack([(A[:, 0] + d * B[0]) / den_c,
                       (A[:, 1] + d * B[1]) / den_c], axis=-1)
        tc = np.clip(np.einsum("nk,nk->n", pc - p_lo, seg) / L**2, 0.0, 1.0)
        half = config.max_arc_px / (2.0 * L)
        t0 = np.where(too_long, np.clip(tc - half, 0.0, 1.0), t0)
        t1 = np.where(too_long, np.clip(tc + half, t0 + 1e-9, 1.0), t1)

    ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, S)[None, :]
    P = p_lo[:, None, :] + ts[..., None] * seg[:, None, :]  # (n, S, 2)
    step_px = np.hypot(*(P[:, 1] - P[:, 0]).T)  # (n,)

    r = config.patch_radius
    ref_vals, ref_ok = _patch_samples(kf_image, xs, r)   # (n, Ko)
    cur_vals, cur_ok = _patch_samples(cur_image, P, r)   # (n, S, Ko)

    valid = cur_ok & ref_ok[:, None, :]
    diff = np.where(valid, ref_vals[:, None, :] - cur_vals, 0.0)
    full = valid.all(axis=-1)
    ssd = np.where(full, np.einsum("nsk,nsk->ns", diff, diff), np.inf)

    oob = ~full.any(axis=1)
    ssd_safe = np.where(oob[:, None], 0.0, ssd)
    best = np.argmin(ssd_safe, axis=1)
    rows = np.arange(n)
    best_score = ssd_safe[rows, best]

    # second-best beyond a pixel separation, for the ambiguity ratio test
    sep = np.maximum(np.ceil(config.min_peak_separation_px /
                             np.maximum(step_px, 1e-9)).astype(int), 1)
    idx = np.arange(S)[None, :]
    near = np.abs(idx - best[:, None]) <= sep[:, None]
    second = np.where(near, np.inf, ssd).min(axis=1)
    with np.errstate(invalid="ignore"):
        ambiguous = ~(second > config.ssd_ratio * best_score + 1e-9)

    # parabolic refinement over the best triplet
    interior = (best > 0) & (best < S - 1)
    c0 = ssd[rows, np.maximum(best - 1, 0)]
    c1 = best_score
    c2 = ssd[rows, np.minimum(best + 1, S - 1)]
    good = interior & np.isfinite(c0) & np.isfinite(c2)
    c0 = np.where(good, c0, c1)
    c2 = np.where(good, c2, c1)
    denom = c0 - 2.0 * c1 + c2
    good &= np.abs(denom) > 1e-12
    frac = np.where(good, 0.5 * (c0 - c2) / np.where(good, denom, 1.0), 0.0)
    frac = np.clip(frac, -0.5, 0.5)

    t_best = ts[rows, best] + frac * (ts[rows, np.minimum(best + 1, S - 1)]
                                      - ts[rows, np.maximum(best - 1, 0)]) / 2.0
    uv = p_lo + t_best[:, None] * seg

    num_u = B[0] * A[:, 2] - B[2] * A[:, 0]
    num_v = B[1] * A[:, 2] - B[2] * A[:, 1]
    use_u = np.abs(num_u) >= np.abs(num_v)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_u = (A[:, 0] - uv[:, 0] * A[:, 2]) / (uv[:, 0] * B[2] - B[0])
        d_v = (A[:, 1] - uv[:, 1] * A[:, 2]) / (uv[:, 1] * B[2] - B[1])
    d_obs = np.where(use_u, d_u, d_v)
    Ko = (2 * r + 1) ** 2
    ok = ~oob & np.isfinite(d_obs) & (d_obs > config.d_min) & \
        (d_obs < config.d_max) & (best_score <= config.max_ssd_per_px * Ko)

    den = (A[:, 2] + np.where(ok, d_obs, 1.0) * B[2]) ** 2
    speed = np.hypot(num_u, num_v) / den
    gain = 1.0 / np.maximum(speed, 1e-15)
    # aperture term: error along the epipolar direction grows as the image
    # gradient turns perpendicular to it
    gnorm = np.hypot(gxs, gys)
    enorm = np.hypot(num_u, num_v)
    denom_ge = np.maximum(gnorm * enorm, 1e-15)
    dot2 = ((gxs * num_u + gys * num_v) / denom_ge) ** 2
    dot2 = np.where(gnorm < 1e-9, config.min_grad_epi_dot2, dot2)
    dot2 = np.maximum(dot2, config.min_grad_epi_dot2)
    var_obs = gain**2 * config.match_sigma_px2 / dot2

    out["uv"][act] = uv
    out["d_obs"][act] = d_obs
    out["score"][act] = best_score
    out["ambiguous"][act] = ambiguous
    out["oob"][act] = oob
    out["ok"][act] = ok
    out["var_obs"][act] = var_obs


def triangulate_line(K: CameraIntrinsics, pose: Pose, l_ref, l_cur) -> Line3D:
    """3D line from its two views via back-projection plane intersection."""
    Km = K.matrix()
    n1 = Km.T @ np.asarray(l_ref, dtype=float)
    n2 = pose.R.T @ Km.T @ np.asarray(l_cur, dtype=float)
    d2 = float(np.asarray(l_cur, dtype=float) @ Km @ pose.t)
    cr = np.cross(n1, n2)
    denom = np.linalg.norm(n1) * np.linalg.norm(n2)
    if np.linalg.norm(cr) < 1e-6 * denom:
        raise DegenerateTriangulation("back-projection planes are parallel")
    # minimum-norm point satisfying both plane equations
    Nmat = np.stack([n1, n2])
    rhs = np.array([0.0, -d2])
    X0 = Nmat.T @ np.linalg.solve(Nmat @ Nmat.T, rhs)
    return Line3D(point=X0, direction=cr / np.linalg.norm(cr))


def project_line3d(K: CameraIntrinsics, pose: Pose, line: Line3D) -> np.ndarray:
    """Image line of a 3D line seen from `pose` (camera gets pose(X))."""
    P1 = pose.transform(line.point)
    P2 = pose.transform(line.point + line.direction)
    # pick two points on the line that sit in front of the camera
    dz = P2[2] - P1[2]
    ts = [0.0, 1.0]
    if min(P1[2], P1[2] + dz) <= 1e-6:
        t_front = (1e-3 - P1[2]) / dz if abs(dz) > 1e-12 else 0.0
        ts = [t_front + 1.0, t_front + 2.0]
    pts = []
    for t in ts:
        X = P1 + t * (P2 - P1)
        if X[2] <= 1e-9:
            raise DegenerateTriangulation("line behind the camera")
        pts.append(np.array([K.fx * X[0] / X[2] + K.cx, K.fy * X[1] / X[2] + K.cy]))
    return line_from_endpoints(pts[0], pts[1])


def ray_line_depth(K: CameraIntrinsics, x_pixel, line: Line3D) -> float:
    """Camera depth where the pixel ray meets a 3D line.

    Uses the midpoint parameter of the common perpendicular when the ray
    and line are skew; the returned value is the ray's z since rays are
    z-normalized.
    """
    r = np.array([(x_pixel[0] - K.cx) / K.fx, (x_pixel[1] - K.cy) / K.fy, 1.0])
    u = line.direction
    q = line.point
    rr = r @ r
    uu = u @ u
    ru = r @ u
    det = rr * uu - ru * ru
    if det < 1e-12 * rr * uu:
        raise DegenerateIntersection("pixel ray parallel to the 3D line")
    s = (uu * (r @ q) - ru * (u @ q)) / det
    if s <= 0:
        raise InvalidDepth(f"ray-line intersection behind the camera (s = {s:.3g})")
    return float(s)


def ekf_depth_update(prior: DepthHypothesis, obs_d: float,
                     obs_var: float) -> DepthHypothesis:
    """Precision-weighted Gaussian fusion of prior and observation."""
    if obs_var <= 0:
        raise InvalidVariance(f"observation variance {obs_var} <= 0")
    m = (obs_var * prior.mean + prior.variance * obs_d) / (prior.variance + obs_var)
    v = prior.variance * obs_var / (prior.variance + obs_var)
    return DepthHypothesis(mean=m, variance=v)


def mahalanobis_point_line(p: WeightedPoint2, line_point, line_dir) -> float:
    """Closed-form min over the line of the covariance-weighted distance."""
    cov = np.asarray(p.cov, dtype=float)
    if abs(np.linalg.det(cov)) < 1e-18:
        cov = cov + VARIANCE_FLOOR * np.eye(2)
    Lam = np.linalg.inv(cov)
    r = np.asarray(p.p, dtype=float) - np.asarray(line_point, dtype=float)
    u = np.asarray(line_dir, dtype=float)
    uLu = float(u @ Lam @ u)
    if uLu < 1e-18:
        return float(r @ Lam @ r)
    uLr = float(u @ Lam @ r)
    return float(r @ Lam @ r - uLr**2 / uLu)


def _information_2x2(covs: np.ndarray) -> np.ndarray:
    """Stacked 2x2 inverses with the same near-singular guard as the scalar."""
    covs = np.asarray(covs, dtype=float)
    a, b = covs[:, 0, 0], covs[:, 0, 1]
    c, dd = covs[:, 1, 0], covs[:, 1, 1]
    det = a * dd - b * c
    bump = np.abs(det) < 1e-18
    if np.any(bump):
        a = a + bump * VARIANCE_FLOOR
        dd = dd + bump * VARIANCE_FLOOR
        det = a * dd - b * c
    Lam = np.empty_like(covs)
    Lam[:, 0, 0] = dd / det
    Lam[:, 0, 1] = -b / det
    Lam[:, 1, 0] = -c / det
    Lam[:, 1, 1] = a / det
    return Lam


def _mahalanobis_scores(p2, Lam, line_point, line_dir):
    """Vectorized mahalanobis_point_line over stacked points/informations."""
    r = p2 - line_point
    Lr0 = Lam[:, 0, 0] * r[:, 0] + Lam[:, 0, 1] * r[:, 1]
    Lr1 = Lam[:, 1, 0] * r[:, 0] + Lam[:, 1, 1] * r[:, 1]
    rLr = r[:, 0] * Lr0 + r[:, 1] * Lr1
    u0, u1 = line_dir
    uLu = u0 * (Lam[:, 0, 0] * u0 + Lam[:, 0, 1] * u1) \
        + u1 * (Lam[:, 1, 0] * u0 + Lam[:, 1, 1] * u1)
    uLr = u0 * Lr0 + u1 * Lr1
    return np.where(uLu < 1e-18, rLr, rLr - uLr**2 / np.maximum(uLu, 1e-300))


def build_plane_frame(normal: np.ndarray, points: np.ndarray) -> PlaneFrame:
    """Chart of the plane through the origin with `normal`, axes from PCA."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    pts = np.asarray(points, dtype=float)
    proj = pts - np.outer(pts @ n, n)
    c = proj.mean(axis=0)
    centered = proj - c
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    x_axis = vt[0]
    x_axis = x_axis - (x_axis @ n) * n
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(n, x_axis)
    return PlaneFrame(origin=c, x_axis=x_axis, y_axis=y_axis)


def weighted_line_fit(points: np.ndarray, weights: np.ndarray):
    """Closed-form weighted least squares of y = b0 + b1 x.

    Solves (X^T W X)^-1 X^T W Y after subtracting the weighted means, which
    decouples slope and intercept.
    """
    pts = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    sw = w.sum()
    xm = float(w @ pts[:, 0] / sw)
    ym = float(w @ pts[:, 1] / sw)
    xt = pts[:, 0] - xm
    yt = pts[:, 1] - ym
    sxx = float(w @ (xt * xt))
    if sxx < 1e-15:
        raise DegenerateLine("all points share one x in the plane frame")
    b1 = float(w @ (xt * yt)) / sxx
    b0 = ym - b1 * xm
    return b0, b1


@dataclass
class RegularizationResult:
    depths: list
    line: Line3D
    inliers: np.ndarray
    pre_rms: float
    post_rms: float


def regularize_edge_depths(K: CameraIntrinsics, edge, depths,
                           config: MappingConfig = None,
                           seed: int = None) -> RegularizationResult:
    """Robust 3D line fit over an edge's depth hypotheses.

    Back-projects pixels onto the edge's back-projection plane, runs RANSAC
    with the Mahalanobis point-line metric, fits the consensus set in
    closed form, re-intersects inlier rays with the fitted line, and
    shrinks inlier variances by the residual-vs-prior scatter ratio.
    Outliers keep their hypotheses untouched.
    """
    config = config or MappingConfig()
    if seed is None:
        seed = config.seed
    pixels = list(edge.pixels)
    valid_idx = [i for i, h in enumerate(depths) if h is not None]
    if len(valid_idx) < config.min_points:
        raise TooFewPoints(f"{len(valid_idx)} depths < minimum {config.min_points}")

    P = np.array([_backproject(K, pixels[i], depths[i].mean) for i in valid_idx])
    n = K.matrix().T @ edge.line
    frame = build_plane_frame(n, P)
    p2 = frame.to_plane(P)

    covs = []
    for k, i in enumerate(valid_idx):
        d = depths[i].mean
        jd = np.array([frame.x_axis @ (-P[k] / d), frame.y_axis @ (-P[k] / d)])
        cov = depths[i].variance * np.outer(jd, jd)
        jpx = np.stack([
            [frame.x_axis[0] / (K.fx * d), frame.x_axis[1] / (K.fy * d)],
            [frame.y_axis[0] / (K.fx * d), frame.y_axis[1] / (K.fy * d)]])
        cov = cov + config.pixel_sigma**2 * (jpx @ jpx.T)
        covs.append(cov + 1e-12 * np.eye(2))
    covs = np.array(covs)

    rng = np.random.default_rng(seed)
    m = len(valid_idx)
    Lam = _information_2x2(covs)
    best_inliers = None
    for _ in range(config.ransac_iterations):
        i, j = rng.choice(m, size=2, replace=False)
        dvec = p2[j] - p2[i]
        nn = np.hypot(*dvec)
        if nn < 1e-9:
            continue
        dvec = dvec / nn
        inl = _mahalanobis_scores(p2, Lam, p2[i], dvec) < config.ransac_chi2
        if best_inliers is None or inl.sum() > best_inliers.sum():
            best_inliers = inl
    if best_inliers is None or best_inliers.sum() < math.ceil(config.min_consensus * m):
        raise NoConsensus(
            f"best consensus {0 if best_inliers is None else int(best_inliers.sum())}"
            f"/{m} below {config.min_consensus:.0%}")

    # closed-form weighted fit on the consensus set, y on x in the plane frame
    sel = np.nonzero(best_inliers)[0]
    perp_var = np.array([covs[k][1, 1] for k in sel])
    w = 1.0 / np.maximum(perp_var, VARIANCE_FLOOR)
    b0, b1 = weighted_line_fit(p2[sel], w)

    dir3 = frame.x_axis + b1 * frame.y_axis
    dir3 = dir3 / np.linalg.norm(dir3)
    line3 = Line3D(point=frame.to_camera(np.array([0.0, b0])), direction=dir3)

    resid = (p2[sel, 1] - b0 - b1 * p2[sel, 0]) / math.sqrt(1.0 + b1 * b1)
    pre_ms = float(w @ resid**2 / w.sum())
    prior_ms = float(w @ perp_var / w.sum())
    ratio = min(max(pre_ms / max(prior_ms, 1e-18), 0.05), 1.0)

    out = list(depths)
    inlier_mask = np.zeros(len(depths), dtype=bool)
    moved = []
    for k in sel:
        i = valid_idx[k]
        try:
            depth_cam = ray_line_depth(K, pixels[i], line3)
        except (DegenerateIntersection, InvalidDepth):
            continue
        shift = 1.0 / depth_cam - depths[i].mean
        # an ill-conditioned fit can send the ray intersection far from the
        # hypothesis; keep snaps inside the prior's plausible band
        if abs(shift) > config.snap_gate_sigmas * math.sqrt(depths[i].variance):
            continue
        inlier_mask[i] = True
        new_var = max(depths[i].variance * ratio, 1e-12)
        moved.append(shift)
        out[i] = DepthHypothesis(mean=1.0 / depth_cam, variance=new_var)
    return RegularizationResult(depths=out, line=line3, inliers=inlier_mask,
                                pre_rms=math.sqrt(pre_ms),
                                post_rms=float(np.sqrt(np.mean(np.square(moved))))
                                if moved else 0.0)


def _backproject(K: CameraIntrinsics, pixel, d: float) -> np.ndarray:
    u, v = pixel
    z = 1.0 / d
    return np.array([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z])


def update_keyframe_depth(kf, cur_image, cur_edges, matches, pose: Pose,
                          config: MappingConfig = None):
    """Two-stage keyframe depth update; returns (new map, stats).

    Per-pixel failures are tallied in the stats and never abort the frame.
    """
    config = config or MappingConfig()
    stats = MappingStats()
    depth = kf.depth.copy()
    K = kf.intrinsics
    defined = depth.defined_mask()
    n_defined = int(defined.sum())

    if float(np.linalg.norm(pose.t)) < 1e-9:
        stats.no_parallax = n_defined
        return depth, stats

    cur_image = np.asarray(cur_image, dtype=float)
    cur_by_id = {s.id: s for s in cur_edges}
    ref_by_id = {s.id: s for s in kf.edges}

    # pixel -> matched current line (and its coefficient covariance)
    h, w = depth.mean.shape
    edge_line = {}
    for mt in matches:
        rs = ref_by_id.get(mt.ref_id)
        cs = cur_by_id.get(mt.cur_id)
        if rs is None or cs is None:
            continue
        Sig = line_coefficient_covariance(cs.p1, cs.p2, config.endpoint_sigma)
        for (u, v) in rs.pixels:
            # expanded off-line pixels would inherit a biased intersection;
            # only pixels on the fitted reference line get the guided path
            on_line = abs(rs.line[0] * u + rs.line[1] * v + rs.line[2]) \
                <= config.on_line_tol
            if on_line and 0 <= u < w and 0 <= v < h and defined[v, u]:
                edge_line[(u, v)] = (cs.line, Sig)

    vv, uu = np.nonzero(defined)
    all_px = list(zip(uu.tolist(), vv.tolist()))
    lg_px = [p for p in all_px if p in edge_line]
    ex_px = [p for p in all_px if p not in edge_line] if config.update_gradient_pixels else []

    fused_mean = depth.mean
    fused_var = depth.variance

    # stage 1a: line-guided matches for matched-edge pixels
    to_exhaustive = []
    if lg_px:
        xs = np.array(lg_px, dtype=float)
        A, B = _homogeneous_params(K, pose, xs)
        raw = np.cross(A, np.broadcast_to(B, A.shape))
        norm_ab = np.hypot(raw[:, 0], raw[:, 1])
        ok = norm_ab > 1e-12
        epi = raw / np.where(ok, norm_ab, 1.0)[:, None]
        lines = np.array([edge_line[p][0] for p in lg_px])
        sigs = np.array([edge_line[p][1] for p in lg_px])
        cosang = np.abs(epi[:, 0] * lines[:, 0] + epi[:, 1] * lines[:, 1])
        theta = np.arccos(np.clip(cosang, 0.0, 1.0))
        ok &= theta >= PARALLEL_ANGLE
        inter = np.cross(epi, lines)
        wcomp = inter[:, 2]
        ok &= np.abs(wcomp) > 1e-12
        uv = inter[:, :2] / np.where(ok, wcomp, 1.0)[:, None]
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & \
              (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)

        num_u = B[0] * A[:, 2] - B[2] * A[:, 0]
        num_v = B[1] * A[:, 2] - B[2] * A[:, 1]
        use_u = np.abs(num_u) >= np.abs(num_v)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_u = (A[:, 0] - uv[:, 0] * A[:, 2]) / (uv[:, 0] * B[2] - B[0])
            d_v = (A[:, 1] - uv[:, 1] * A[:, 2]) / (uv[:, 1] * B[2] - B[1])
        d_obs = np.where(use_u, d_u, d_v)
        valid = ok & np.isfinite(d_obs) & (d_obs > config.d_min) & (d_obs < config.d_max)

        xh = np.concatenate([uv, np.ones((uv.shape[0], 1))], axis=1)
        sig_l2 = np.einsum("ni,nij,nj->n", xh, sigs, xh)
        s2 = np.sin(theta) ** 2
        s2 = np.where(s2 < 1e-12, 1.0, s2)
        sig_lam2 = sig_l2 / s2 + config.epipolar_sigma2 * (1.0 - s2) / s2
        den = (A[:, 2] + np.where(valid, d_obs, 1.0) * B[2]) ** 2
        speed = np.hypot(num_u, num_v) / den
        var_obs = sig_lam2 / np.maximum(speed, 1e-15) ** 2

        stats.degenerate_line_guided = int(np.count_nonzero(~ok))
        stats.invalid_obs += int(np.count_nonzero(ok & ~valid))
        for k, (u, v) in enumerate(lg_px):
            if not ok[k]:
                to_exhaustive.append((u, v))
            elif valid[k]:
                pm, pv = fused_mean[v, u], fused_var[v, u]
                if pv <= 0:
                    continue
                ov = max(float(var_obs[k]), VARIANCE_FLOOR * 1e-6)
                fused_mean[v, u] = (ov * pm + pv * d_obs[k]) / (pv + ov)
                fused_var[v, u] = pv * ov / (pv + ov)
                stats.line_guided += 1
                stats.fused += 1

    # stage 1b: exhaustive SSD for the rest
    ex_all = ex_px + to_exhaustive
    if ex_all:
        xs = np.array(ex_all, dtype=float)
        d0 = np.array([depth.mean[v, u] for (u, v) in ex_all])
        v0 = np.array([depth.variance[v, u] for (u, v) in ex_all])
        res = _batch_exhaustive(K, pose, kf.image, cur_image, xs, d0, v0, config)
        good = res["ok"] & ~res["ambiguous"]
        stats.converged += int(res["skipped"].sum())
        stats.out_of_bounds += int(res["oob"].sum())
        stats.ambiguous += int(np.count_nonzero(res["ok"] & res["ambiguous"]))
        stats.invalid_obs += int(np.count_nonzero(
            ~res["ok"] & ~res["oob"] & ~res["skipped"]))
        for k, (u, v) in enumerate(ex_all):
            if not good[k]:
                continue
            pm, pv = fused_mean[v, u], fused_var[v, u]
            if pv <= 0:
                continue
            ov = max(float(res["var_obs"][k]), VARIANCE_FLOOR * 1e-6)
            fused_mean[v, u] = (ov * pm + pv * res["d_obs"][k]) / (pv + ov)
            fused_var[v, u] = pv * ov / (pv + ov)
            stats.exhaustive += 1
            stats.fused += 1

    out_map = InverseDepthMap(fused_mean, fused_var)

    # stage 2: per-edge 3D line regularization
    if config.regularize:
        for mt in matches:
            rs = ref_by_id.get(mt.ref_id)
            if rs is None:
                continue
            hyps = []
            for (u, v) in rs.pixels:
                if 0 <= u < w and 0 <= v < h and \
                        np.isfinite(out_map.mean[v, u]) and out_map.variance[v, u] > 0 \
                        and out_map.mean[v, u] > 0:
                    hyps.append(DepthHypothesis(float(out_map.mean[v, u]),
                                                float(out_map.variance[v, u])))
                else:
                    hyps.append(None)
            try:
                reg = regularize_edge_depths(K, rs, hyps, config,
                                             seed=config.seed + mt.ref_id)
            except (TooFewPoints, NoConsensus, DegenerateIntersection) as e:
                stats.regularization_failures += 1
                stats.notes.append(f"edge {mt.ref_id}: {e}")
                continue
            for i, (u, v) in enumerate(rs.pixels):
                if reg.inliers[i]:
                    out_map.mean[v, u] = reg.depths[i].mean
                    out_map.variance[v, u] = reg.depths[i].variance
            stats.regularized_edges += 1

    return out_map, stats
