import math

import numpy as np
import pytest

from edgevo.edges import LineSegment2D, match_edges, trace_pixels
from edgevo.errors import DegenerateSystem, NoObservations
from edgevo.geometry import exp_map, log_map, point_line_signed_distance, warp
from edgevo.imageops import InverseDepthMap, high_gradient_mask
from edgevo.tracking import (KeyframeState, ResidualSystem, TrackerConfig,
                             build_system, gauss_newton_step, geometric_residual,
                             photometric_residual, track_frame)
from helpers import (fd_jacobian, interior_keyframe, jacobian_max_rel_err,
                     perturbed_init, pose_errors, rel_pose)


def gt_keyframe(frame, K, photometric_on_edges=False):
    return KeyframeState.assemble(frame.image, frame.gt_depth.copy(),
                                  frame.gt_edges, K, grad_threshold=3.0,
                                  photometric_on_edges=photometric_on_edges)


def edge_pixel_mask(frame, shape):
    mask = np.zeros(shape, dtype=bool)
    for seg in frame.gt_edges:
        for u, v in seg.pixels:
            mask[v, u] = True
    return mask


# ------------------------------------------------------------ keyframe sets

def test_assemble_photometric_set_excludes_edges(box_frames, K):
    frame = box_frames[0]
    em = edge_pixel_mask(frame, frame.image.shape)
    kf_off = gt_keyframe(frame, K, photometric_on_edges=False)
    kf_on = gt_keyframe(frame, K, photometric_on_edges=True)
    assert not (kf_off.high_gradient_mask & em).any()
    assert (kf_on.high_gradient_mask & em).any()
    # the inclusive set contains the exclusive one
    assert (kf_on.high_gradient_mask | kf_off.high_gradient_mask).sum() == \
        kf_on.high_gradient_mask.sum()


def test_assemble_depth_support(box_frames, K):
    frame = box_frames[0]
    kf = gt_keyframe(frame, K)
    em = edge_pixel_mask(frame, frame.image.shape)
    want = (kf.high_gradient_mask | em) & frame.gt_depth.defined_mask()
    assert np.array_equal(kf.depth.defined_mask(), want)


def test_assemble_noise_floor_gates_gradients(box_frames, K):
    """Intensity noise must raise the effective gradient threshold: with
    sigma = 5 the naive grad > 3 mask fires almost everywhere, while the
    assembled photometric set stays close to real structure."""
    frame = box_frames[0]
    rng = np.random.default_rng(0)
    noisy = frame.image + 5.0 * rng.standard_normal(frame.image.shape)
    naive = high_gradient_mask(noisy, 3.0)
    kf = KeyframeState.assemble(noisy, frame.gt_depth.copy(), frame.gt_edges, K,
                                grad_threshold=3.0, photometric_on_edges=False)
    assert kf.high_gradient_mask.sum() < 0.3 * naive.sum()
    assert kf.high_gradient_mask.sum() > 0


# ---------------------------------------------------------- residual system

def test_build_system_identity_pair_zero_cost(box_frames, K):
    frame = box_frames[0]
    kf = gt_keyframe(frame, K)
    matches = match_edges(kf.edges, frame.gt_edges, mode="gt")
    sys = build_system(kf, frame.image, frame.gt_edges, matches, np.zeros(6))
    assert sys.n_photometric > 500
    assert sys.n_geometric > 500
    assert sys.cost() < 1e-12
    # row bookkeeping: photometric rows equal the masked pixel count,
    # geometric rows equal the matched edge pixels with defined depth
    omega = kf.high_gradient_mask & kf.depth.defined_mask()
    assert sys.n_photometric == omega.sum()
    defined = kf.depth.defined_mask()
    want_geo = sum(sum(1 for u, v in s.pixels if defined[v, u])
                   for s in kf.edges)
    assert sys.n_geometric == want_geo
    assert sys.residuals.shape[0] == sys.n_photometric + sys.n_geometric
    assert sys.jacobian.shape == (sys.residuals.shape[0], 6)
    assert np.all(sys.weights > 0)


def test_build_system_small_at_gt_pose(box_frames, dolly_poses, K):
    frame0, frame1 = box_frames[0], box_frames[1]
    kf = gt_keyframe(frame0, K)
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    xi_gt = log_map(rel_pose(dolly_poses, 0, 1))
    sys = build_system(kf, frame1.image, frame1.gt_edges, matches, xi_gt)
    phot = sys.residuals[:sys.n_photometric]
    geo = sys.residuals[sys.n_photometric:]
    assert np.sqrt(np.mean(phot ** 2)) < 4.0   # interpolation residue only
    assert np.mean(np.abs(geo)) < 0.3          # sub-pixel line agreement

    # ground truth must beat a visibly wrong pose
    xi_bad = perturbed_init(rel_pose(dolly_poses, 0, 1), [0.2, 1.0, -0.3], 2.0)
    sys_bad = build_system(kf, frame1.image, frame1.gt_edges, matches, xi_bad)
    assert sys.cost() < 0.1 * sys_bad.cost()


def test_photometric_rows_match_scalar_reference(box_frames, dolly_poses, K):
    frame0, frame1 = box_frames[0], box_frames[1]
    kf = gt_keyframe(frame0, K)
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    xi = log_map(rel_pose(dolly_poses, 0, 1))
    sys = build_system(kf, frame1.image, frame1.gt_edges, matches, xi)
    vv, uu = np.nonzero(kf.high_gradient_mask & kf.depth.defined_mask())
    for row in (0, 17, 101, len(uu) - 1):
        ref = photometric_residual(kf, frame1.image, (uu[row], vv[row]), xi)
        assert sys.residuals[row] == pytest.approx(ref, abs=1e-9)


def test_geometric_residual_is_signed_line_distance(K):
    line = np.array([0.6, 0.8, -100.0])
    x = np.array([80.0, 90.0])
    xi = np.array([0.02, -0.01, 0.03, 0.004, -0.002, 0.006])
    want = point_line_signed_distance(line, warp(K, x, 0.5, xi))
    assert geometric_residual(K, line, x, 0.5, xi) == pytest.approx(want, abs=1e-12)


def test_jacobian_matches_finite_differences(box_frames, dolly_poses, K):
    """Smoke-scale version of the acceptance sweep: one pose, every row."""
    kf = interior_keyframe(box_frames[0], K, margin=24, stride=4)
    frame1 = box_frames[1]
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    xi = perturbed_init(rel_pose(dolly_poses, 0, 1), [0.5, -0.2, 0.8], 1.0,
                        trans_scale=1.02)
    sys, J_fd, keep = fd_jacobian(kf, frame1.image, frame1.gt_edges, matches, xi)
    assert keep.sum() > 0.9 * keep.size
    assert jacobian_max_rel_err(sys, J_fd, keep) < 1e-4


# ------------------------------------------------------------- Gauss-Newton

def test_gauss_newton_step_reduces_cost(box_frames, dolly_poses, K):
    frame1 = box_frames[1]
    kf = gt_keyframe(box_frames[0], K)
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    xi = perturbed_init(rel_pose(dolly_poses, 0, 1), [0.1, 0.9, -0.4], 0.5,
                        trans_scale=1.03)
    sys = build_system(kf, frame1.image, frame1.gt_edges, matches, xi)
    delta = gauss_newton_step(sys)
    xi_next = log_map(exp_map(delta) @ exp_map(xi))
    sys_next = build_system(kf, frame1.image, frame1.gt_edges, matches, xi_next)
    assert sys_next.cost() < sys.cost()


def test_gauss_newton_degenerate_single_direction():
    """All rows constrain the same twist direction: the normal matrix is
    rank one and the solver must refuse it."""
    n = 12
    J = np.tile(np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]), (n, 1))
    sys = ResidualSystem(residuals=np.linspace(0.1, 1.0, n), jacobian=J,
                         weights=np.ones(n))
    with pytest.raises(DegenerateSystem):
        gauss_newton_step(sys)


def test_single_line_leaves_sliding_direction_unconstrained(box_frames, K):
    """One matched horizontal line at constant depth cannot pin down motion
    along itself; the full 6-dof system from that edge alone is degenerate."""
    frame = box_frames[0]
    edge = LineSegment2D(id=0, p1=np.array([60.0, 100.0]),
                         p2=np.array([260.0, 100.0]))
    edge.pixels = trace_pixels(edge)
    mean = np.full(frame.image.shape, np.nan)
    var = np.full(frame.image.shape, np.nan)
    for u, v in edge.pixels:
        mean[v, u] = 0.5
        var[v, u] = 1e-4
    kf = KeyframeState.assemble(frame.image, InverseDepthMap(mean, var), [edge], K,
                                grad_threshold=1e9, photometric_on_edges=False)
    cur_edge = LineSegment2D(id=0, p1=edge.p1.copy(), p2=edge.p2.copy())
    cur_edge.pixels = trace_pixels(cur_edge)
    matches = match_edges([edge], [cur_edge], mode="gt")
    sys = build_system(kf, frame.image, [cur_edge], matches, np.zeros(6),
                       TrackerConfig(photometric_weight=0.0))
    assert sys.n_photometric == 0 and sys.n_geometric > 0
    with pytest.raises(DegenerateSystem):
        gauss_newton_step(sys)


def test_three_line_pencil_is_well_posed(box_frames, K):
    """Three orientations at three depths pin all six degrees of freedom."""
    frame = box_frames[0]
    specs = [(0, (40.0, 60.0), (280.0, 60.0), 0.5),
             (1, (60.0, 200.0), (160.0, 30.0), 1.0),
             (2, (80.0, 40.0), (240.0, 210.0), 2.0)]
    edges, mean = [], np.full(frame.image.shape, np.nan)
    var = np.full(frame.image.shape, np.nan)
    for sid, p1, p2, d in specs:
        e = LineSegment2D(id=sid, p1=np.array(p1), p2=np.array(p2))
        e.pixels = trace_pixels(e)
        for u, v in e.pixels:
            mean[v, u] = d
            var[v, u] = 1e-4
        edges.append(e)
    kf = KeyframeState.assemble(frame.image, InverseDepthMap(mean, var), edges, K,
                                grad_threshold=1e9, photometric_on_edges=False)
    matches = match_edges(edges, edges, mode="gt")
    sys = build_system(kf, frame.image, edges, matches, np.zeros(6),
                       TrackerConfig(photometric_weight=0.0))
    H = sys.jacobian.T @ (sys.weights[:, None] * sys.jacobian)
    assert np.linalg.cond(H) < 1e12
    delta = gauss_newton_step(sys)
    assert np.linalg.norm(delta) < 1e-6  # already at the optimum


# ------------------------------------------------------------ full tracking

def test_track_identity_pair(box_frames, K):
    frame = box_frames[0]
    kf = gt_keyframe(frame, K)
    matches = match_edges(kf.edges, frame.gt_edges, mode="gt")
    res = track_frame(kf, frame.image, frame.gt_edges, matches, np.zeros(6))
    assert np.linalg.norm(res.xi) < 1e-10
    for level, trace in res.cost_traces.items():
        assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_track_recovers_small_perturbation(box_frames, dolly_poses, K):
    kf = gt_keyframe(box_frames[0], K)
    frame1 = box_frames[1]
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    rel = rel_pose(dolly_poses, 0, 1)
    xi0 = perturbed_init(rel, [0.3, -0.5, 0.8], 1.0, trans_scale=1.2,
                         trans_offset=[0.003, -0.002, 0.0])
    cfg = TrackerConfig(pyramid_levels=3, max_iterations=50, huber_threshold=8.0)
    res = track_frame(kf, frame1.image, frame1.gt_edges, matches, xi0, cfg)
    dt, da = pose_errors(exp_map(res.xi), rel)
    assert dt < 2e-3
    assert da < 0.02


def test_track_abort_without_observations(hw_frames, K):
    """Homogeneous walls expose no off-edge gradients, so photometric-only
    tracking with the edge-exclusive pixel set has nothing to solve."""
    kf = KeyframeState.assemble(hw_frames[0].image, hw_frames[0].gt_depth.copy(),
                                hw_frames[0].gt_edges, K, grad_threshold=3.0,
                                photometric_on_edges=False)
    matches = match_edges(kf.edges, hw_frames[1].gt_edges, mode="gt")
    cfg = TrackerConfig(geometric_weight=0.0)
    with pytest.raises(NoObservations, match="no valid residual"):
        track_frame(kf, hw_frames[1].image, hw_frames[1].gt_edges, matches,
                    np.zeros(6), cfg)


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(pyramid_levels=0)
    with pytest.raises(ValueError):
        TrackerConfig(scale_factor=1)


def test_huber_downweights_corrupted_edge(box_frames, dolly_poses, K):
    """Shift one matched edge by 15 px: robust reweighting must keep the
    estimate closer to the ground truth than plain least squares."""
    kf = gt_keyframe(box_frames[0], K)
    frame1 = box_frames[1]
    corrupted = []
    for s in frame1.gt_edges:
        c = LineSegment2D(id=s.id, p1=s.p1.copy(), p2=s.p2.copy())
        if s.id == 5:
            c = LineSegment2D(id=s.id, p1=s.p1 + np.array([15.0, 15.0]),
                              p2=s.p2 + np.array([15.0, 15.0]))
        c.pixels = trace_pixels(c)
        corrupted.append(c)
    matches = match_edges(kf.edges, corrupted, mode="gt")
    rel = rel_pose(dolly_poses, 0, 1)
    xi0 = log_map(rel)
    base = TrackerConfig(pyramid_levels=2, max_iterations=40, geometric_weight=5.0)
    plain = track_frame(kf, frame1.image, corrupted, matches, xi0, base)
    robust = track_frame(kf, frame1.image, corrupted, matches, xi0,
                         TrackerConfig(pyramid_levels=2, max_iterations=40,
                                       geometric_weight=5.0, huber_threshold=2.0))
    dt_plain, _ = pose_errors(exp_map(plain.xi), rel)
    dt_robust, _ = pose_errors(exp_map(robust.xi), rel)
    assert dt_robust < dt_plain
    assert dt_robust < 2e-3


def test_motion_prior_pins_solution(box_frames, K):
    frame = box_frames[0]
    kf = gt_keyframe(frame, K)
    matches = match_edges(kf.edges, frame.gt_edges, mode="gt")
    xi_prior = np.array([0.004, -0.002, 0.003, 0.001, -0.0005, 0.002])
    cfg = TrackerConfig(prior_weight_t=1e9, prior_weight_r=1e9)
    res = track_frame(kf, frame.image, frame.gt_edges, matches, np.zeros(6),
                      cfg, xi_prior=xi_prior)
    assert np.allclose(res.xi, xi_prior, atol=1e-4)


def test_track_result_bookkeeping(box_frames, dolly_poses, K):
    kf = gt_keyframe(box_frames[0], K)
    frame1 = box_frames[1]
    matches = match_edges(kf.edges, frame1.gt_edges, mode="gt")
    res = track_frame(kf, frame1.image, frame1.gt_edges, matches,
                      log_map(rel_pose(dolly_poses, 0, 1)))
    assert set(res.cost_traces) == set(res.n_rows)
    for level, (n_phot, n_geo) in res.n_rows.items():
        assert n_phot >= 0 and n_geo >= 0
