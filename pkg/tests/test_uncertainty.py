import math

import numpy as np
import pytest

from edgevo.errors import DegenerateIntersection, NoParallax
from edgevo.geometry import Pose, line_from_endpoints
from edgevo.uncertainty import (VARIANCE_FLOOR, ObservationVariances,
                                disparity_to_inverse_depth_gain,
                                disparity_variance, inverse_depth_obs_variance,
                                line_coefficient_covariance,
                                line_distance_variance, propagate,
                                reprojection_variance)


def test_propagate_hand_case():
    J = np.array([[1.0, 2.0], [0.0, 1.0]])
    Sigma = np.diag([4.0, 9.0])
    out = propagate(J, Sigma)
    assert np.allclose(out, [[40.0, 18.0], [18.0, 9.0]])
    assert np.allclose(out, out.T)


def test_propagate_dimension_mismatch():
    with pytest.raises(ValueError):
        propagate(np.eye(2), np.eye(3))


def test_observation_variances_validation():
    ObservationVariances(sigma_r2=1.0, sigma_l2=2.0)
    with pytest.raises(ValueError):
        ObservationVariances(sigma_r2=0.0, sigma_l2=1.0)


def test_disparity_variance_perpendicular_is_exact():
    # at 90 degrees the epipolar term vanishes below one ulp, so equality
    # holds bit-for-bit
    assert disparity_variance(2.7, 13.0, math.pi / 2) == 2.7


def test_disparity_variance_45_degrees():
    assert disparity_variance(1.0, 1.0, math.pi / 4) == pytest.approx(3.0, abs=1e-12)


def test_disparity_variance_blows_up_toward_parallel():
    thetas = [0.6, 0.5, 0.4, 0.3, 0.2, 0.15]
    vals = [disparity_variance(1.0, 1.0, t) for t in thetas]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_disparity_variance_symmetric_about_pi_half():
    v1 = disparity_variance(1.3, 0.7, 1.0)
    v2 = disparity_variance(1.3, 0.7, math.pi - 1.0)
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_disparity_variance_degenerate_and_domain():
    with pytest.raises(DegenerateIntersection):
        disparity_variance(1.0, 1.0, math.radians(3.0))
    with pytest.raises(DegenerateIntersection):
        disparity_variance(1.0, 1.0, math.radians(177.0))
    with pytest.raises(ValueError):
        disparity_variance(1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        disparity_variance(1.0, 1.0, math.pi)


def test_line_distance_variance_is_quadratic_form():
    Sigma = np.array([[0.01, 0.0, 0.001],
                      [0.0, 0.02, -0.002],
                      [0.001, -0.002, 0.5]])
    x = np.array([3.0, 4.0])
    xh = np.array([3.0, 4.0, 1.0])
    assert line_distance_variance(Sigma, x) == pytest.approx(xh @ Sigma @ xh)


def test_reprojection_variance_hand_case():
    line = np.array([1.0, 0.0, -5.0])
    Sigma_l = np.diag([0.01, 0.02, 0.5])
    Sigma_x = np.diag([0.25, 0.36])
    out = reprojection_variance(line, Sigma_l, np.array([3.0, 4.0]), Sigma_x)
    # line term 9*0.01 + 16*0.02 + 0.5, point term 1^2 * 0.25
    assert out == pytest.approx(0.09 + 0.32 + 0.5 + 0.25)


def test_reprojection_variance_floor():
    line = np.array([1.0, 0.0, 0.0])
    out = reprojection_variance(line, np.zeros((3, 3)), np.array([0.0, 0.0]),
                                np.zeros((2, 2)))
    assert out == VARIANCE_FLOOR


def test_line_coefficient_covariance_monte_carlo():
    """Independent check of the analytic endpoint-noise propagation with a
    small Monte Carlo run (the acceptance suite runs the 1e5-sample version)."""
    p1 = np.array([40.0, 60.0])
    p2 = np.array([210.0, 150.0])
    sigma = 1.0
    Sigma_a = line_coefficient_covariance(p1, p2, sigma)
    assert np.allclose(Sigma_a, Sigma_a.T)
    assert np.all(np.linalg.eigvalsh(Sigma_a) >= -1e-15)

    rng = np.random.default_rng(42)
    n = 20000
    q1 = p1 + sigma * rng.standard_normal((n, 2))
    q2 = p2 + sigma * rng.standard_normal((n, 2))
    d = q2 - q1
    norm = np.hypot(d[:, 0], d[:, 1])
    a = d[:, 1] / norm
    b = -d[:, 0] / norm
    ref = line_from_endpoints(p1, p2)
    flip = np.sign(a * ref[0] + b * ref[1])
    a, b = a * flip, b * flip
    c = -(a * q1[:, 0] + b * q1[:, 1])
    mc = np.cov(np.stack([a, b, c]))
    assert np.linalg.norm(mc - Sigma_a) / np.linalg.norm(Sigma_a) < 0.2
    for i in range(3):
        assert mc[i, i] == pytest.approx(Sigma_a[i, i], rel=0.2)


def test_longer_segments_are_better_localized():
    short = line_coefficient_covariance(np.array([0.0, 0.0]), np.array([20.0, 0.0]))
    long = line_coefficient_covariance(np.array([0.0, 0.0]), np.array([200.0, 0.0]))
    assert np.trace(long[:2, :2]) < np.trace(short[:2, :2])


def test_inverse_depth_gain_lateral_oracle(K):
    """Pure lateral motion gives disparity = fx * b * d at the principal
    point, so the gain dd/dlambda must equal 1 / (fx * b)."""
    b = 0.1
    pose = Pose(np.eye(3), np.array([b, 0.0, 0.0]))
    x = np.array([K.cx, K.cy])
    for d in (0.2, 0.5, 1.5):
        g = disparity_to_inverse_depth_gain(K, pose, x, d)
        assert abs(g) == pytest.approx(1.0 / (K.fx * b), rel=1e-9)


def test_inverse_depth_gain_no_parallax(K):
    with pytest.raises(NoParallax):
        disparity_to_inverse_depth_gain(K, Pose.identity(), np.array([100.0, 100.0]),
                                        0.5)


def test_inverse_depth_obs_variance_scales_by_gain_squared(K):
    b = 0.1
    pose = Pose(np.eye(3), np.array([b, 0.0, 0.0]))
    x = np.array([K.cx, K.cy])
    sigma_lambda2 = 0.8
    out = inverse_depth_obs_variance(sigma_lambda2, K, pose, x, 0.5)
    g = disparity_to_inverse_depth_gain(K, pose, x, 0.5)
    assert out == pytest.approx(g * g * sigma_lambda2, rel=1e-12)
