"""Contamination-robust estimators: spectral filtering, robust moments, trimmed
logistic MLE and trimmed least squares."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .preferences import log_sigmoid, sigmoid

logger = logging.getLogger(__name__)

MAD_TO_SD = 1.4826
EIG_FLOOR = 1e-6


def _check_points(points, epsilon) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[0] == 0:
        raise ParameterError("need at least one point")
    if not 0 <= epsilon < 0.5:
        raise ParameterError("epsilon must lie in [0, 1/2)")
    return points


def _worst_direction(centered: np.ndarray, epsilon: float, variance: float | None):
    """Eigen-direction whose spread most exceeds its clean variance.

    With a known clean variance this is the top eigenvector.  Otherwise every
    eigenvector is compared against its own robust spread, so a small cluster hidden
    in a low-variance direction is caught even when a clean direction dominates.
    Returns ``(eigenvalue, clean variance, direction)``.
    """
    cov = centered.T @ centered / centered.shape[0]
    w, v = np.linalg.eigh(cov)
    if variance is not None:
        return w[-1], variance, v[:, -1]
    proj = centered @ v
    clean = np.array([_direction_variance(proj[:, j], epsilon) for j in range(len(w))])
    j = int(np.argmax(w / np.maximum(clean, 1e-300)))
    return w[j], clean[j], v[:, j]


def _direction_variance(proj: np.ndarray, epsilon: float) -> float:
    """Robust spread of 1-d projections: max of the MAD estimate and the variance of
    the ``1 - epsilon`` fraction closest to the median."""
    dev = np.abs(proj - np.median(proj))
    mad_var = (MAD_TO_SD * np.median(dev)) ** 2
    keep = max(1, int(math.ceil((1 - epsilon) * len(proj))))
    core = proj[np.argsort(dev, kind="stable")[:keep]]
    return max(mad_var, float(core.var()))


def spectral_filter(
    points,
    epsilon: float,
    variance: float | None = None,
    threshold_scale: float = 5.0,
    rounds: int = 10,
) -> np.ndarray:
    """Indices of the points that survive top-eigenvector filtering.

    Each round looks at an eigenvector of the survivors' covariance (the top one when
    ``variance`` is given).  If its eigenvalue is at most
    ``variance * (1 + threshold_scale * epsilon)`` the loop stops;
    otherwise the ``ceil(epsilon * m / rounds)`` points whose projection lies furthest
    from the median projection are dropped.  At most ``2 * epsilon * m`` points are
    removed overall.  ``variance`` is the clean per-direction variance when known;
    otherwise it is estimated robustly along each eigen-direction.
    """
    points = _check_points(points, epsilon)
    m = points.shape[0]
    alive = np.arange(m)
    if epsilon == 0 or m < 2:
        return alive
    total_cap = int(math.floor(2 * epsilon * m))
    step = max(1, int(math.ceil(epsilon * m / rounds)))
    removed = 0
    while removed < total_cap:
        sub = points[alive]
        centered = sub - sub.mean(axis=0)
        top, clean_var, v = _worst_direction(centered, epsilon, variance)
        proj = centered @ v
        if top <= clean_var * (1 + threshold_scale * epsilon):
            break
        k = min(step, total_cap - removed)
        score = (proj - np.median(proj)) ** 2
        drop = np.argsort(-score, kind="stable")[:k]
        alive = np.delete(alive, drop)
        removed += k
    return alive


def robust_mean(points, epsilon: float, **filter_kw) -> np.ndarray:
    points = _check_points(points, epsilon)
    if epsilon == 0:
        return points.mean(axis=0)
    return points[spectral_filter(points, epsilon, **filter_kw)].mean(axis=0)


def robust_covariance(points, epsilon: float, **filter_kw) -> np.ndarray:
    points = _check_points(points, epsilon)
    sub = points if epsilon == 0 else points[spectral_filter(points, epsilon, **filter_kw)]
    centered = sub - sub.mean(axis=0)
    cov = centered.T @ centered / sub.shape[0]
    return (cov + cov.T) / 2


def robust_second_moment(points, epsilon: float, **filter_kw) -> np.ndarray:
    """Uncentered second moment ``E[x x^T]`` of the filtered points."""
    points = _check_points(points, epsilon)
    sub = points if epsilon == 0 else points[spectral_filter(points, epsilon, **filter_kw)]
    mom = sub.T @ sub / sub.shape[0]
    return (mom + mom.T) / 2


def inverse_sqrt_psd(mat: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v / np.sqrt(np.maximum(w, floor))) @ v.T


# ------------------------------------------------------------ logistic likelihood


def log_likelihoods(theta: np.ndarray, diffs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample ``log sigma(o * theta^T dphi)``."""
    return log_sigmoid(labels * (diffs @ theta))


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(theta)
    return theta if norm <= radius else theta * (radius / norm)


@dataclass
class MleResult:
    theta: np.ndarray
    objective: float  # mean log-likelihood
    iterations: int
    converged: bool


def constrained_mle(
    diffs,
    labels,
    norm_bound: float,
    theta0=None,
    tol: float = 1e-10,
    max_iters: int = 20_000,
) -> MleResult:
    """Maximize the mean Bradley-Terry log-likelihood over ``||theta|| <= norm_bound``.

    Accelerated projected gradient ascent with function-value restarts.  The returned
    iterate is the best one visited, so warm starts never lose objective value.
    """
    X = np.asarray(diffs, float)
    o = np.asarray(labels, float)
    m, D = X.shape
    if m == 0:
        theta = np.zeros(D) if theta0 is None else np.asarray(theta0, float)
        return MleResult(theta, 0.0, 0, True)
    step = 4.0 * m / max(np.linalg.norm(X, 2) ** 2, 1e-12)  # 1 / Lipschitz constant

    def value(th):
        return float(log_sigmoid(o * (X @ th)).mean())

    def grad(th):
        return X.T @ (o * sigmoid(-o * (X @ th))) / m

    theta = project_ball(np.zeros(D) if theta0 is None else np.asarray(theta0, float), norm_bound)
    best, best_val = theta, value(theta)
    y, t_mom, prev_val = theta, 1.0, best_val
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new = project_ball(y + step * grad(y), norm_bound)
        new_val = value(new)
        if new_val < prev_val:  # restart momentum
            y, t_mom = theta, 1.0
            new = project_ball(theta + step * grad(theta), norm_bound)
            new_val = value(new)
        t_next = (1 + math.sqrt(1 + 4 * t_mom * t_mom)) / 2
        y = new + ((t_mom - 1) / t_next) * (new - theta)
        move = np.linalg.norm(new - theta)
        theta, t_mom, prev_val = new, t_next, new_val
        if new_val > best_val:
            best, best_val = new, new_val
        if move <= tol * max(1.0, np.linalg.norm(theta)):
            converged = True
            break
    return MleResult(best, best_val, it, converged)


@dataclass(frozen=True)
class TrimmedMleConfig:
    epsilon: float = 0.0
    nu: float = 1e-8
    max_outer_iters: int = 50
    norm_bound: float | None = None  # defaults to sqrt(H d) = sqrt(len(theta))
    whitening_enabled: bool = True
    filtering_enabled: bool = True
    epsilon_eff: float | None = None  # overrides the trimming fraction
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon < 0.5:
            raise ParameterError("epsilon must lie in [0, 1/2)")
        if self.epsilon_eff is not None and not 0 <= self.epsilon_eff < 0.5:
            raise ParameterError("epsilon_eff must lie in [0, 1/2)")
        if self.nu <= 0:
            raise ParameterError("nu must be positive")
        if self.max_outer_iters < 1:
            raise ParameterError("max_outer_iters must be positive")


@dataclass
class TrimmedMleResult:
    theta: np.ndarray
    inliers: np.ndarray  # indices into the input rows that form the final trimmed set
    used: np.ndarray  # rows that entered the alternation (after splitting and filtering)
    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # (sum over S_t of L at theta_t, at theta_{t+1})


def trimmed_mle(diffs, labels, config: TrimmedMleConfig = TrimmedMleConfig()) -> TrimmedMleResult:
    """Trimmed maximum likelihood for one agent's Bradley-Terry labels.

    With whitening, half of the rows estimates a robust second moment that whitens the
    other half for the spectral filter.  The log-likelihood is invariant to whitening
    (``theta^T Sigma^{1/2} Sigma^{-1/2} dphi = theta^T dphi``), so the alternation runs
    on the surviving rows in their original coordinates and ``theta`` never needs to be
    mapped back.
    """
    X = np.asarray(diffs, float)
    o = np.asarray(labels, float)
    m, D = X.shape
    eps = config.epsilon
    bound = config.norm_bound if config.norm_bound is not None else math.sqrt(D)
    rows = np.arange(m)

    if config.whitening_enabled and eps > 0 and m >= 4:
        order = np.random.default_rng(config.seed).permutation(m)
        first, rows = np.sort(order[: m // 2]), np.sort(order[m // 2:])
        sigma = robust_second_moment(X[first], eps)
        whitened = X[rows] @ inverse_sqrt_psd(sigma)
        if config.filtering_enabled:
            rows = rows[spectral_filter(whitened, eps, variance=1.0)]
    elif config.filtering_enabled and eps > 0:
        rows = rows[spectral_filter(X, eps)]

    Xs, os_ = X[rows], o[rows]
    trim_eps = config.epsilon_eff if config.epsilon_eff is not None else eps
    keep = int(math.ceil((1 - trim_eps) * len(rows) - 1e-9))

    def select(theta):
        ll = log_likelihoods(theta, Xs, os_)
        return np.sort(np.argsort(-ll, kind="stable")[:keep])

    theta = np.zeros(D)
    history = []
    converged = False
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        chosen = select(theta)
        fit = constrained_mle(Xs[chosen], os_[chosen], bound, theta0=theta)
        before = float(log_likelihoods(theta, Xs[chosen], os_[chosen]).sum())
        after = float(log_likelihoods(fit.theta, Xs[chosen], os_[chosen]).sum())
        history.append((before, after))
        theta = fit.theta
        if after <= before + config.nu:
            converged = True
            break
    if not converged:
        logger.warning("trimmed MLE stopped after %d outer iterations without converging", it)
    return TrimmedMleResult(theta, rows[select(theta)], rows, it, converged, history)


# ------------------------------------------------------------ robust regression


@dataclass
class RobustRegressionResult:
    omega: np.ndarray
    inlier_mask: np.ndarray
    iterations: int
    rank_warning: bool = False


def ridge(X: np.ndarray, y: np.ndarray, reg: float) -> np.ndarray:
    D = X.shape[1]
    return np.linalg.solve(X.T @ X + reg * np.eye(D), X.T @ y)


def robust_least_squares(
    x,
    y,
    epsilon: float,
    reg: float = 1e-3,
    rounds: int = 5,
    norm_bound: float | None = None,
) -> RobustRegressionResult:
    """Iteratively trimmed ridge regression.

    Fit on the current inliers, keep the ``m - floor(epsilon * m)`` points with the
    smallest squared residual, refit; stop after ``rounds`` refits or once the inlier
    set is stable.  The coefficient vector is rescaled onto ``||omega|| <= norm_bound``.
    """
    X = np.asarray(x, float)
    y = np.asarray(y, float)
    if not 0 <= epsilon < 0.5:
        raise ParameterError("epsilon must lie in [0, 1/2)")
    m, D = X.shape
    trim = int(math.floor(epsilon * m + 1e-12))
    mask = np.ones(m, bool)
    omega = ridge(X, y, reg)
    it = 0
    for it in range(1, rounds + 1):
        if trim == 0:
            break
        resid = (X @ omega - y) ** 2
        new_mask = np.zeros(m, bool)
        new_mask[np.argsort(resid, kind="stable")[: m - trim]] = True
        if (new_mask == mask).all():
            break
        mask = new_mask
        omega = ridge(X[mask], y[mask], reg)
    rank_warning = int(mask.sum()) < D
    if norm_bound is not None:
        omega = project_ball(omega, norm_bound)
    return RobustRegressionResult(omega, mask, it, rank_warning)
