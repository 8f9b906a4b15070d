import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robust_marlhf.errors import ParameterError
from robust_marlhf.preferences import corrupt_dataset, generate_clean_dataset
from robust_marlhf.robust import (
    TrimmedMleConfig,
    constrained_mle,
    inverse_sqrt_psd,
    log_likelihoods,
    ridge,
    robust_covariance,
    robust_least_squares,
    robust_mean,
    robust_second_moment,
    spectral_filter,
    trimmed_mle,
)
from conftest import uniform_policy


def _contaminated(rng, m=1000, k=50, d=4, dist=100.0):
    clean = rng.standard_normal((m, d))
    direction = rng.standard_normal(d)
    outliers = np.tile(direction / np.linalg.norm(direction) * dist, (k, 1))
    return clean, np.vstack([clean, outliers])


# --------------------------------------------------------------- means and covariances


def test_mean_exact_at_zero_epsilon():
    pts = np.random.default_rng(0).standard_normal((37, 3))
    assert np.array_equal(robust_mean(pts, 0.0), pts.mean(axis=0))
    assert np.allclose(robust_covariance(pts, 0.0), np.cov(pts.T, bias=True), atol=1e-14, rtol=0)


def test_symmetric_points_center():
    rng = np.random.default_rng(1)
    c = np.array([1.5, -2.0, 0.25])
    x = rng.standard_normal((20, 3))
    assert np.allclose(robust_mean(np.vstack([c + x, c - x]), 0.0), c, atol=1e-9)


def test_identical_points_zero_covariance():
    pts = np.ones((30, 2)) * 3.0
    assert np.array_equal(robust_covariance(pts, 0.1), np.zeros((2, 2)))


def test_robust_mean_resists_far_outliers():
    errs, naive = [], []
    for seed in range(5):
        clean, pts = _contaminated(np.random.default_rng(seed))
        eps = 50 / len(pts)
        errs.append(np.linalg.norm(robust_mean(pts, eps) - clean.mean(axis=0)))
        naive.append(np.linalg.norm(pts.mean(axis=0) - clean.mean(axis=0)))
    assert np.mean(errs) <= 0.5
    assert min(naive) >= 4


def test_robust_covariance_resists_outliers():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((4, 4))
    sigma = A @ A.T / 4 + np.eye(4)
    ratios = []
    for seed in range(5):
        r = np.random.default_rng(seed + 10)
        clean = r.multivariate_normal(np.zeros(4), sigma, size=1000)
        pts = np.vstack([clean, np.tile(30 * np.linalg.eigh(sigma)[1][:, 0], (50, 1))])
        clean_err = np.linalg.norm(np.cov(clean.T, bias=True) - sigma, 2)
        robust_err = np.linalg.norm(robust_covariance(pts, 0.05) - sigma, 2)
        ratios.append(robust_err / clean_err)
    assert np.mean(ratios) <= 3


def test_empty_and_bad_epsilon():
    with pytest.raises(ParameterError):
        robust_mean(np.zeros((0, 2)), 0.1)
    with pytest.raises(ParameterError):
        spectral_filter(np.zeros((5, 2)), 0.5)


def test_second_moment_and_inverse_sqrt():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((200, 3))
    mom = robust_second_moment(pts, 0.0)
    assert np.allclose(mom, pts.T @ pts / 200)
    w = inverse_sqrt_psd(mom)
    assert np.allclose(w @ mom @ w, np.eye(3), atol=1e-10)
    # rank-deficient input gets the eigenvalue floor instead of blowing up
    assert np.all(np.isfinite(inverse_sqrt_psd(np.diag([1.0, 0.0]))))


# --------------------------------------------------------------- spectral filter


def test_filter_keeps_everything_at_zero_epsilon():
    pts = np.random.default_rng(4).standard_normal((50, 2))
    assert np.array_equal(spectral_filter(pts, 0.0), np.arange(50))


def test_filter_on_isotropic_data():
    pts = np.random.default_rng(5).standard_normal((1000, 5))
    alive = spectral_filter(pts, 0.1)
    assert len(alive) >= 800
    assert np.linalg.norm(pts[alive].mean(axis=0) - pts.mean(axis=0)) <= 0.1


def test_filter_removes_single_outlier():
    pts = np.random.default_rng(6).standard_normal((200, 3))
    pts[17] = [1e3, -1e3, 1e3]
    alive = spectral_filter(pts, 1 / 200)
    assert 17 not in alive


@given(
    pts=arrays(np.float64, st.tuples(st.integers(2, 60), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
    eps=st.floats(0.0, 0.49),
)
@settings(max_examples=60, deadline=None)
def test_filter_removal_cap(pts, eps):
    alive = spectral_filter(pts, eps)
    m = len(pts)
    assert m - len(alive) <= math.floor(2 * eps * m)
    assert len(np.unique(alive)) == len(alive)


# --------------------------------------------------------------- least squares


def _design(rng, m, d):
    x = rng.standard_normal((m, d))
    return x / np.maximum(1.0, np.linalg.norm(x, axis=1, keepdims=True))


def test_ls_matches_ridge_without_outliers():
    rng = np.random.default_rng(7)
    X = _design(rng, 300, 4)
    y = X @ np.array([0.5, -1.0, 0.2, 0.0]) + 0.1 * rng.standard_normal(300)
    res = robust_least_squares(X, y, 0.0, reg=1e-3)
    assert np.allclose(res.omega, ridge(X, y, 1e-3), atol=1e-10, rtol=0)
    assert res.inlier_mask.all()


def test_ls_noiseless_recovery_and_zero_targets():
    rng = np.random.default_rng(8)
    X = _design(rng, 400, 3)
    omega = np.array([1.0, 2.0, -0.5])
    assert np.allclose(robust_least_squares(X, X @ omega, 0.0, reg=1e-12).omega, omega, atol=1e-6)
    assert np.array_equal(robust_least_squares(X, np.zeros(400), 0.1).omega, np.zeros(3))


def test_ls_resists_planted_offsets():
    ratio_robust, ratio_naive = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed + 20)
        X = _design(rng, 1000, 4)
        omega = np.array([1.0, -1.0, 0.5, 0.25])
        y = X @ omega + 0.1 * rng.standard_normal(1000)
        bad = rng.choice(1000, 50, replace=False)
        y_bad = y.copy()
        y_bad[bad] += 100
        keep = np.setdiff1d(np.arange(1000), bad)
        clean_err = np.linalg.norm(ridge(X[keep], y[keep], 1e-3) - omega)
        ratio_robust.append(np.linalg.norm(robust_least_squares(X, y_bad, 0.05).omega - omega) / clean_err)
        ratio_naive.append(np.linalg.norm(ridge(X, y_bad, 1e-3) - omega) / clean_err)
    assert np.mean(ratio_robust) <= 5
    assert np.mean(ratio_naive) >= 20 * np.mean(ratio_robust)


def test_ls_norm_clamp_and_inlier_count():
    rng = np.random.default_rng(9)
    X = _design(rng, 100, 2)
    res = robust_least_squares(X, 50 * X[:, 0], 0.2, norm_bound=2.0)
    assert np.linalg.norm(res.omega) <= 2.0 + 1e-12
    assert res.inlier_mask.sum() == 100 - 20
    # fewer inliers than dimensions still solves, with a warning flag
    tiny = robust_least_squares(_design(rng, 3, 4), np.ones(3), 0.0)
    assert tiny.rank_warning and np.all(np.isfinite(tiny.omega))


# --------------------------------------------------------------- trimmed MLE


def _gradient_ascent_oracle(X, o, bound, iters=200_000, step=None):
    """Plain projected gradient ascent, deliberately unlike the accelerated solver."""
    theta = np.zeros(X.shape[1])
    step = step or 2.0 * len(X) / np.linalg.norm(X, 2) ** 2
    for _ in range(iters):
        g = X.T @ (o / (1 + np.exp(o * (X @ theta)))) / len(X)
        new = theta + step * g
        nrm = np.linalg.norm(new)
        if nrm > bound:
            new *= bound / nrm
        if np.linalg.norm(new - theta) < 1e-13:
            return new
        theta = new
    return theta


@pytest.mark.parametrize("bound", [0.5, 10.0])
def test_trimmed_mle_without_trimming_is_the_mle(identical, bound):
    data = generate_clean_dataset(identical, uniform_policy(identical), uniform_policy(identical), 400, 0)
    X = data.feature_differences(identical.features)
    o = data.labels[:, 0].astype(float)
    cfg = TrimmedMleConfig(epsilon=0.0, whitening_enabled=False, filtering_enabled=False, norm_bound=bound)
    est = trimmed_mle(X, o, cfg).theta
    assert np.linalg.norm(est - _gradient_ascent_oracle(X, o, bound)) <= 1e-4


def test_zero_reward_gives_small_estimate():
    rng = np.random.default_rng(11)
    half = rng.standard_normal((2500, 4))
    X = np.vstack([half, -half])  # symmetric differences
    o = np.where(rng.random(5000) < 0.5, 1.0, -1.0)
    est = trimmed_mle(X, o, TrimmedMleConfig(epsilon=0.0)).theta
    assert np.linalg.norm(est) <= 0.2


def test_trimmed_mle_beats_naive_under_targeted_flips(identical):
    wins = 0
    theta_star = identical.reward_params[0].ravel()
    bound = math.sqrt(theta_star.size)
    for seed in range(20):
        data = generate_clean_dataset(identical, uniform_policy(identical), uniform_policy(identical), 2000, seed)
        bad = corrupt_dataset(data, 0.2, "label_flip_targeted", 100 + seed, identical)
        X = bad.feature_differences(identical.features)
        o = bad.labels[:, 0]
        robust = trimmed_mle(X, o, TrimmedMleConfig(epsilon=0.2, seed=seed)).theta
        naive = constrained_mle(X, o, bound).theta
        wins += np.linalg.norm(robust - theta_star) <= np.linalg.norm(naive - theta_star)
    assert wins >= 18


@given(seed=st.integers(0, 10_000), eps=st.sampled_from([0.0, 0.1, 0.3]))
@settings(max_examples=15, deadline=None)
def test_trimmed_mle_invariants(seed, eps):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((120, 4)) / 2
    theta = rng.standard_normal(4)
    o = np.where(rng.random(120) < 1 / (1 + np.exp(-X @ theta)), 1.0, -1.0)
    res = trimmed_mle(X, o, TrimmedMleConfig(epsilon=eps, seed=seed))
    assert np.linalg.norm(res.theta) <= 2.0 + 1e-9
    assert len(res.inliers) == math.ceil((1 - eps) * len(res.used) - 1e-9)
    for before, after in res.history:
        assert after >= before - 1e-9
    # successive trimmed sets never lower the objective of the current iterate
    again = trimmed_mle(X, o, TrimmedMleConfig(epsilon=eps, seed=seed))
    assert np.array_equal(again.theta, res.theta)
    assert log_likelihoods(res.theta, X[res.inliers], o[res.inliers]).sum() >= res.history[-1][1] - 1e-9


def test_trimmed_mle_config_validation():
    with pytest.raises(ParameterError):
        TrimmedMleConfig(epsilon=0.5)
    with pytest.raises(ParameterError):
        TrimmedMleConfig(nu=0.0)
