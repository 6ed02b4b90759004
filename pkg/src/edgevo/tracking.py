"""Frame-to-keyframe pose tracking.

Minimizes the joint photometric + edge-reprojection cost with Gauss-Newton
over se(3), coarse to fine across a factor-2 pyramid. Twists map keyframe
coordinates into the current frame; increments are left-composed,
xi <- log(exp(delta) * exp(xi)), and the analytic Jacobians are derived for
that convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .edges import scale_to_level
from .errors import DegenerateSystem, NoObservations
from .geometry import CameraIntrinsics, Pose, exp_map, log_map
from .imageops import InverseDepthMap, bilinear_sample_with_gradient, high_gradient_mask
from .uncertainty import VARIANCE_FLOOR, line_coefficient_covariance

COND_LIMIT = 1e12


@dataclass
class KeyframeState:
    """Reference frame: image, semi-dense inverse depth, edges, intrinsics.

    Depth is defined exactly on high_gradient_mask union edge pixels;
    high_gradient_mask is the photometric pixel set Omega.
    """

    image: np.ndarray
    depth: InverseDepthMap
    edges: list
    high_gradient_mask: np.ndarray
    intrinsics: CameraIntrinsics

    @staticmethod
    def assemble(image, depth: InverseDepthMap, edges, K: CameraIntrinsics,
                 grad_threshold: float = 8.0,
                 photometric_on_edges: bool = True) -> "KeyframeState":
        """Restrict a depth map to the semi-dense pixel set.

        Edge segments must already carry traced pixels. With
        photometric_on_edges off, edge pixels serve only the geometric term.
        """
        image = np.asarray(image, dtype=float)
        h, w = image.shape
        edge_mask = np.zeros((h, w), dtype=bool)
        for s in edges:
            for (u, v) in s.pixels:
                if 0 <= u < w and 0 <= v < h:
                    edge_mask[v, u] = True
        grad = high_gradient_mask(image, grad_threshold)
        omega = (grad | edge_mask) if photometric_on_edges else (grad & ~edge_mask)
        keep = (omega | edge_mask) & depth.defined_mask()
        mean = np.where(keep, depth.mean, np.nan)
        var = np.where(keep, depth.variance, np.nan)
        return KeyframeState(image=image, depth=InverseDepthMap(mean, var),
                             edges=list(edges), high_gradient_mask=omega & keep,
                             intrinsics=K)


@dataclass(frozen=True)
class TrackerConfig:
    pyramid_levels: int = 2
    scale_factor: int = 2
    max_iterations: int = 20
    convergence_eps: float = 1e-7
    huber_threshold: float = None
    photometric_weight: float = 1.0
    geometric_weight: float = 1.0
    sigma_r2: float = 4.0
    endpoint_sigma: float = 1.0
    # rasterized edge pixels sit up to ~1 px off their fitted line, so each
    # geometric row carries positional variance beyond the line-fit terms;
    # stated in full-resolution px^2 and rescaled per pyramid level
    pixel_sigma2: float = 4.0
    max_step_halvings: int = 5
    max_dropped_fraction: float = 0.9
    # constant-velocity prior: weights on (xi - xi_prior), translation and
    # rotation blocks; zero disables (no prior rows are added)
    prior_weight_t: float = 0.0
    prior_weight_r: float = 0.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("need at least one pyramid level")
        if self.scale_factor < 2:
            raise ValueError("pyramid scale factor must be >= 2")
        if self.scale_factor != 2:
            raise NotImplementedError("only factor-2 pyramids are implemented")


@dataclass
class ResidualSystem:
    """Stacked residuals E, Jacobian rows dE/dxi, diagonal weights."""

    residuals: np.ndarray
    jacobian: np.ndarray
    weights: np.ndarray
    n_photometric: int = 0
    n_geometric: int = 0
    dropped_photometric: int = 0
    dropped_geometric: int = 0

    def cost(self) -> float:
        return float(self.weights @ self.residuals**2)


def _point_jacobians(K: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """d(projection)/d(left increment) for (N, 3) transformed points: (N, 2, 6).

    Twist order is (translation; rotation). Columns 0..2 are the projection
    derivative; 3..5 fold in -[X]_x.
    """
    x, y, z = X[:, 0], X[:, 1], X[:, 2]
    iz = 1.0 / z
    iz2 = iz * iz
    n = X.shape[0]
    J = np.empty((n, 2, 6))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 1] = 0.0
    J[:, 0, 2] = -K.fx * x * iz2
    J[:, 0, 3] = -K.fx * x * y * iz2
    J[:, 0, 4] = K.fx * (1.0 + x * x * iz2)
    J[:, 0, 5] = -K.fx * y * iz
    J[:, 1, 0] = 0.0
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz2
    J[:, 1, 3] = -K.fy * (1.0 + y * y * iz2)
    J[:, 1, 4] = K.fy * x * y * iz2
    J[:, 1, 5] = K.fy * x * iz
    return J


def photometric_residual(kf: KeyframeState, cur: np.ndarray, x, xi) -> float:
    """Reference intensity at x minus current intensity at the warped point."""
    from .geometry import warp

    u, v = int(round(x[0])), int(round(x[1]))
    d = kf.depth.mean[v, u]
    if not np.isfinite(d):
        raise ValueError(f"no depth at pixel ({u}, {v})")
    uv = warp(kf.intrinsics, (float(x[0]), float(x[1])), float(d), xi)
    vals, _, valid = bilinear_sample_with_gradient(cur, uv)
    if not valid:
        raise NoObservations(f"warp of ({u}, {v}) leaves the image: {uv}")
    return float(kf.image[v, u] - vals)


def geometric_residual(K: CameraIntrinsics, l, x, d: float, xi) -> float:
    """Signed distance of the warped pixel to its matched line (normalized l)."""
    from .geometry import warp

    uv = warp(K, x, d, xi)
    return float(l[0] * uv[0] + l[1] * uv[1] + l[2])


class _LevelData:
    """Per-pyramid-level observation arrays, fixed across GN iterations."""

    def __init__(self, kf: KeyframeState, cur_image, cur_edges, matches,
                 level: int, config: TrackerConfig):
        from .imageops import downsample_half

        self.level = level
        K = kf.intrinsics
        image = kf.image
        depth = kf.depth
        omega = kf.high_gradient_mask
        cur = np.asarray(cur_image, dtype=float)
        for _ in range(level):
            image = downsample_half(image)
            cur = downsample_half(cur)
            depth = depth.decimate_half()
            h2, w2 = omega.shape[0] // 2, omega.shape[1] // 2
            o = omega[: 2 * h2, : 2 * w2]
            omega = o[0::2, 0::2] | o[0::2, 1::2] | o[1::2, 0::2] | o[1::2, 1::2]
            K = K.halved()
        self.K = K
        self.cur = cur

        defined = depth.defined_mask()
        phot = (omega & defined) if config.photometric_weight > 0 \
            else np.zeros_like(defined)
        vv, uu = np.nonzero(phot)
        self.phot_uv = np.stack([uu, vv], axis=1).astype(float)
        self.phot_d = depth.mean[vv, uu]
        self.phot_ref = image[vv, uu]
        self.phot_rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy,
                                   np.ones(uu.shape)], axis=1)

        # geometric rows: matched keyframe edge pixels with depth
        xs, ds, dvars, lines, sigL, eids = [], [], [], [], [], []
        if config.geometric_weight > 0:
            ref_by_id = {s.id: s for s in kf.edges}
            cur_by_id = {s.id: s for s in cur_edges}
            for m in matches:
                rs = ref_by_id.get(m.ref_id)
                cs = cur_by_id.get(m.cur_id)
                if rs is None or cs is None:
                    continue
                rs_l = scale_to_level(rs, level)
                cs_l = scale_to_level(cs, level)
                Sig = line_coefficient_covariance(cs_l.p1, cs_l.p2,
                                                  config.endpoint_sigma)
                # level-0 segments keep their as-traced pixel lists
                pix = rs.pixels if level == 0 else rs_l.pixels
                lr = rs_l.line
                for (u, v) in pix:
                    if not (0 <= u < K.width and 0 <= v < K.height):
                        continue
                    d = depth.mean[v, u]
                    if not np.isfinite(d):
                        continue
                    # rasterized pixels sit off the fitted source line; warp
                    # their perpendicular foot instead so the residual is not
                    # polluted by the source-side offset
                    off = lr[0] * u + lr[1] * v + lr[2]
                    xs.append((u - off * lr[0], v - off * lr[1]))
                    ds.append(d)
                    dvars.append(depth.variance[v, u])
                    lines.append(cs_l.line)
                    sigL.append(Sig)
                    eids.append(m.ref_id)
        n = len(xs)
        self.geo_uv = np.array(xs, dtype=float).reshape(n, 2)
        self.geo_d = np.array(ds)
        self.geo_var = np.array(dvars) if n else np.zeros(0)
        counts = {}
        for e in eids:
            counts[e] = counts.get(e, 0) + 1
        self.geo_nrows = np.array([counts[e] for e in eids], dtype=float) \
            if n else np.zeros(0)
        self.geo_lines = np.array(lines).reshape(n, 3)
        self.geo_sigL = np.array(sigL).reshape(n, 3, 3)
        self.geo_eids = eids
        self.geo_rays = np.stack([
            (self.geo_uv[:, 0] - K.cx) / K.fx,
            (self.geo_uv[:, 1] - K.cy) / K.fy,
            np.ones(n)], axis=1) if n else np.zeros((0, 3))


def _build_from_level(data: _LevelData, xi, config: TrackerConfig,
                      need_jacobian: bool = True) -> ResidualSystem:
    T = exp_map(np.asarray(xi, dtype=float))
    R, t = T.R, T.t
    K = data.K
    rows_r, rows_J, rows_w = [], [], []
    n_phot = n_geo = drop_phot = drop_geo = 0

    if data.phot_uv.shape[0]:
        P = data.phot_rays / data.phot_d[:, None]
        X = P @ R.T + t
        ok = X[:, 2] > 1e-9
        z = np.where(ok, X[:, 2], 1.0)
        uv = np.stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy], axis=1)
        vals, grads, inb = bilinear_sample_with_gradient(data.cur, uv)
        ok &= inb
        drop_phot = int(np.count_nonzero(~ok))
        if np.any(ok):
            r = data.phot_ref[ok] - vals[ok]
            w = np.full(r.shape, config.photometric_weight / config.sigma_r2)
            if config.huber_threshold is not None:
                u = np.abs(r) / math.sqrt(config.sigma_r2)
                w *= np.minimum(1.0, config.huber_threshold / np.maximum(u, 1e-12))
            rows_r.append(r)
            rows_w.append(w)
            n_phot = r.shape[0]
            if need_jacobian:
                Jp = _point_jacobians(K, X[ok])
                rows_J.append(-np.einsum("ni,nij->nj", grads[ok], Jp))

    if data.geo_uv.shape[0]:
        P = data.geo_rays / data.geo_d[:, None]
        X = P @ R.T + t
        ok = X[:, 2] > 1e-9
        z = np.where(ok, X[:, 2], 1.0)
        uv = np.stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy], axis=1)
        drop_geo = int(np.count_nonzero(~ok))
        if np.any(ok):
            L = data.geo_lines[ok]
            g = L[:, 0] * uv[ok, 0] + L[:, 1] * uv[ok, 1] + L[:, 2]
            # residual variance: line-coefficient term + depth-through-warp
            # term. Every row of a segment shares the same matched line, so
            # its coefficient noise is perfectly correlated across them;
            # scaling that share by the segment's row count caps the whole
            # segment at one line's worth of information instead of n
            # independent copies chasing the same jitter.
            xh = np.concatenate([uv[ok], np.ones((g.shape[0], 1))], axis=1)
            line_term = np.einsum("ni,nij,nj->n", xh, data.geo_sigL[ok], xh)
            line_term = line_term * data.geo_nrows[ok]
            dxdd = _epipolar_speed(K, T, data.geo_rays[ok], data.geo_d[ok])
            ab_dot = L[:, 0] * dxdd[:, 0] + L[:, 1] * dxdd[:, 1]
            var_d = np.nan_to_num(data.geo_var[ok], nan=0.0)
            # pixel_sigma2 is stated in full-resolution pixels; converting to
            # this level's units shrinks it 4x per level, which keeps the
            # line pull strong while coarse and lets photometric rows refine
            # the fine level
            px2 = config.pixel_sigma2 / 4.0**data.level
            sigma_g2 = np.maximum(
                line_term + var_d * ab_dot**2 + px2, VARIANCE_FLOOR)
            w = config.geometric_weight / sigma_g2
            if config.huber_threshold is not None:
                u = np.abs(g) / np.sqrt(sigma_g2)
                w *= np.minimum(1.0, config.huber_threshold / np.maximum(u, 1e-12))
            rows_r.append(g)
            rows_w.append(w)
            n_geo = g.shape[0]
            if need_jacobian:
                Jp = _point_jacobians(K, X[ok])
                rows_J.append(np.einsum("ni,nij->nj", L[:, :2], Jp))

    attempted = data.phot_uv.shape[0] + data.geo_uv.shape[0]
    kept = n_phot + n_geo
    if kept == 0:
        raise NoObservations("no valid residual terms")
    if attempted and (attempted - kept) / attempted > config.max_dropped_fraction:
        raise NoObservations(
            f"{attempted - kept}/{attempted} terms dropped; tracking diverged")
    return ResidualSystem(
        residuals=np.concatenate(rows_r),
        jacobian=np.concatenate(rows_J) if need_jacobian else np.zeros((kept, 6)),
        weights=np.concatenate(rows_w),
        n_photometric=n_phot, n_geometric=n_geo,
        dropped_photometric=drop_phot, dropped_geometric=drop_geo)


def _epipolar_speed(K: CameraIntrinsics, T: Pose, rays, d):
    """d(warped pixel)/d(inverse depth) per row: (N, 2)."""
    A = rays @ T.R.T  # = R K^-1 xhat, per row
    B = T.t
    denom = (A[:, 2] + d * B[2]) ** 2
    du = (B[0] * A[:, 2] - B[2] * A[:, 0]) / denom
    dv = (B[1] * A[:, 2] - B[2] * A[:, 1]) / denom
    return np.stack([K.fx * du, K.fy * dv], axis=1)


def build_system(kf: KeyframeState, cur_image, cur_edges, matches, xi,
                 config: TrackerConfig = None, level: int = 0) -> ResidualSystem:
    """Stack photometric and geometric rows with analytic Jacobians."""
    config = config or TrackerConfig()
    data = _LevelData(kf, cur_image, cur_edges, matches, level, config)
    return _build_from_level(data, xi, config)


def gauss_newton_step(sys: ResidualSystem) -> np.ndarray:
    """Solve the weighted 6x6 normal equations for the twist increment."""
    Jw = sys.jacobian * sys.weights[:, None]
    H = Jw.T @ sys.jacobian
    if np.linalg.cond(H) > COND_LIMIT:
        raise DegenerateSystem(f"normal equations condition {np.linalg.cond(H):.3e}")
    b = Jw.T @ sys.residuals
    return -np.linalg.solve(H, b)


@dataclass
class TrackResult:
    xi: np.ndarray
    cost_traces: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    n_rows: dict = field(default_factory=dict)


def _append_prior(sys: ResidualSystem, xi, xi_prior, config: TrackerConfig):
    """Six extra rows pulling xi toward a motion prediction (identity rows)."""
    if xi_prior is None or (config.prior_weight_t <= 0 and config.prior_weight_r <= 0):
        return sys
    w = np.array([config.prior_weight_t] * 3 + [config.prior_weight_r] * 3)
    sys.residuals = np.concatenate([sys.residuals, xi - xi_prior])
    sys.jacobian = np.concatenate([sys.jacobian, np.eye(6)])
    sys.weights = np.concatenate([sys.weights, w])
    return sys


def track_frame(kf: KeyframeState, cur_image, cur_edges, matches, xi_init,
                config: TrackerConfig = None, xi_prior=None) -> TrackResult:
    """Coarse-to-fine Gauss-Newton with step-halving backtracking."""
    config = config or TrackerConfig()
    xi = np.asarray(xi_init, dtype=float).copy()
    if xi_prior is not None:
        xi_prior = np.asarray(xi_prior, dtype=float)
    traces, dropped, nrows = {}, {}, {}
    for level in reversed(range(config.pyramid_levels)):
        data = _LevelData(kf, cur_image, cur_edges, matches, level, config)
        trace = []
        try:
            sys = _append_prior(_build_from_level(data, xi, config),
                                xi, xi_prior, config)
            cost = sys.cost()
            trace.append(cost)
            for _ in range(config.max_iterations):
                delta = gauss_newton_step(sys)
                step = delta
                accepted = None
                for _ in range(config.max_step_halvings + 1):
                    xi_try = log_map(exp_map(step) @ exp_map(xi))
                    sys_try = _append_prior(_build_from_level(data, xi_try, config),
                                            xi_try, xi_prior, config)
                    if sys_try.cost() <= cost:
                        accepted = (xi_try, sys_try)
                        break
                    step = step / 2.0
                if accepted is None:
                    break
                xi, sys = accepted
                cost = sys.cost()
                trace.append(cost)
                if float(np.linalg.norm(step)) < config.convergence_eps:
                    break
        except (NoObservations, DegenerateSystem) as e:
            raise type(e)(f"level {level}: {e}") from e
        traces[level] = trace
        dropped[level] = (sys.dropped_photometric, sys.dropped_geometric)
        nrows[level] = (sys.n_photometric, sys.n_geometric)
    return TrackResult(xi=xi, cost_traces=traces, dropped=dropped, n_rows=nrows)
