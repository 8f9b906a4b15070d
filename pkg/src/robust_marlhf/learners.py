"""Offline equilibrium learners driven by corrupted preference data.

Three learners share one backbone: estimate each agent's reward parameter from
preference labels, run a backward robust regression of Bellman targets on the
``mu``-side transitions of the second data half, and select a policy by its estimated
gap ``sum_i Vbar^dagger_{i,0}(s0) - Vlow_{i,0}(s0)``.

* ``uniform_learner``: trimmed MLE plus an l2 confidence ball; optimistic and
  pessimistic rewards in closed form; no bonus.
* ``unilateral_learner``: a log-likelihood confidence set around the trimmed MLE,
  projected gradient ascent on a robust-mean surrogate, and an elliptical bonus.
* ``cce_learner``: the unilateral reward estimate with stage-wise hedge dynamics,
  returning a stage-correlated policy.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .errors import EstimationError, ModelError, ParameterError
from .game import (
    GameSkeleton,
    ProductMarkovPolicy,
    StageCorrelatedPolicy,
    candidate_policies,
    deviation_values,
    others_marginal,
    smallest_nonzero_eigenvalue,
)
from .hedge import HEDGE_VARIANTS, default_hedge_rate, optimistic_hedge
from .preferences import PreferenceDataset, log_sigmoid, split_dataset
from .robust import (
    TrimmedMleConfig,
    constrained_mle,
    robust_least_squares,
    robust_mean,
    robust_second_moment,
    trimmed_mle,
)

LEARNERS = ("uniform", "unilateral", "cce", "naive_baseline")


@dataclass(frozen=True)
class LearnerConfig:
    epsilon: float = 0.0
    delta: float = 0.1
    lam: float | None = None  # serialized as "lambda"; None means d H log(m / delta) / m
    eta1: float | None = None  # None means 1 / sqrt(t1)
    eta2: float | None = None  # None means 1 / (n * max(1, log t2))
    nu: float = 1e-6
    t1: int = 100
    t2: int = 1000
    hedge_variant: str = "optimistic"
    radius_cap: float = 10.0
    c1: float = 1.0
    c2: float = 1.0
    candidate_policy_budget: int = 100_000
    seed: int = 0
    # knobs beyond the fixed key set
    mixture_resolution: int = 2
    ls_reg: float = 1e-3
    ls_rounds: int = 5
    whitening: bool = True
    epsilon_eff: float | None = None
    pga_init_scale: float = 0.1
    noise_scale: float = 0.0
    bonus_enabled: bool = True
    kappa: float | None = None  # None means 6 eps H sqrt(d) + (2 d / m) log(H m / delta)

    def __post_init__(self):
        if not 0 <= self.epsilon < 0.5:
            raise ParameterError("epsilon must lie in [0, 1/2)")
        if not 0 < self.delta < 1:
            raise ParameterError("delta must lie in (0, 1)")
        if self.hedge_variant not in HEDGE_VARIANTS:
            raise ParameterError(f"hedge_variant must be one of {HEDGE_VARIANTS}")
        if self.t1 < 0 or self.t2 < 0:
            raise ParameterError("t1 and t2 must be nonnegative")
        if self.nu <= 0:
            raise ParameterError("nu must be positive")
        if self.lam is not None and self.lam < 0:
            raise ParameterError("lambda must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown learner config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    def regularizer(self, m: int, d: int, H: int) -> float:
        if self.lam is not None:
            return self.lam
        return d * H * math.log(max(m, 2) / self.delta) / max(m, 1)


# ----------------------------------------------------------------- data views


@dataclass(frozen=True, eq=False)
class TransitionData:
    """``mu``-side state and joint-action indices of the regression half, ``(m, H)``."""

    states: np.ndarray
    actions: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: PreferenceDataset) -> "TransitionData":
        return cls(dataset.states, dataset.actions)

    def __len__(self):
        return self.states.shape[0]


# ------------------------------------------------------------------ reward models


@dataclass(eq=False)
class UnilateralSet:
    """``{theta : per-step norms <= sqrt(d), (2/m) sum log[sig(o a^T x) / sig(o theta^T x)] <= kappa}``."""

    anchor: np.ndarray
    diffs: np.ndarray
    labels: np.ndarray
    kappa: float
    horizon: int
    feature_dim: int

    def __post_init__(self):
        # the constraint only sees signed differences o * dphi; repeated rows are merged
        signed = self.labels[:, None] * self.diffs
        self._rows, self._counts = np.unique(signed, axis=0, return_counts=True) if len(signed) else (signed, np.zeros(0))
        self._weights = 2.0 * self._counts / max(len(self.labels), 1)
        self._anchor_ll = log_sigmoid(self._rows @ self.anchor)

    def ratio(self, theta) -> float:
        return float(self._weights @ (self._anchor_ll - log_sigmoid(self._rows @ theta)))

    def step_norms(self, theta) -> np.ndarray:
        return np.linalg.norm(np.reshape(theta, (self.horizon, self.feature_dim)), axis=1)

    def contains(self, theta, tol: float = 1e-10) -> bool:
        return self.ratio(theta) <= self.kappa + tol and self.step_norms(theta).max() <= math.sqrt(self.feature_dim) + tol


def clamp_step_norms(theta, horizon: int, feature_dim: int) -> np.ndarray:
    steps = np.array(theta, float).reshape(horizon, feature_dim)
    norms = np.linalg.norm(steps, axis=1)
    bound = math.sqrt(feature_dim)
    scale = np.where(norms > bound, bound / np.maximum(norms, 1e-300), 1.0)
    return (steps * scale[:, None]).ravel()


def unilateral_kappa(epsilon: float, horizon: int, feature_dim: int, m: int, delta: float) -> float:
    return 6 * epsilon * horizon * math.sqrt(feature_dim) + (2 * feature_dim / m) * math.log(horizon * m / delta)


def project_confidence_set(theta, cset: UnilateralSet, steps: int = 50) -> np.ndarray:
    """Feasible point on the segment from the anchor to ``theta``.

    Both constraints are convex and hold at the anchor, so feasibility along the
    segment is an interval ``[0, t*]``; ``t*`` is found by bisection.  This is a radial
    retraction, not the Euclidean projection.
    """
    theta = np.asarray(theta, float)
    if not cset.contains(cset.anchor):
        raise ModelError("confidence-set anchor is infeasible")
    if cset.contains(theta, tol=0.0):
        return theta
    lo, hi = 0.0, 1.0
    direction = theta - cset.anchor
    # margins are affine in t along the segment, so each bisection step is O(m)
    z_anchor = cset._rows @ cset.anchor
    z_dir = cset._rows @ direction
    bound = math.sqrt(cset.feature_dim)

    def feasible(t):
        ratio = cset._weights @ (cset._anchor_ll - log_sigmoid(z_anchor + t * z_dir))
        return ratio <= cset.kappa and cset.step_norms(cset.anchor + t * direction).max() <= bound

    for _ in range(steps):
        mid = (lo + hi) / 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return clamp_step_norms(cset.anchor + lo * direction, cset.horizon, cset.feature_dim)


@dataclass(eq=False)
class RobustRewardModel:
    theta_hat: np.ndarray  # (n, H d)
    theta_tilde: np.ndarray  # trimmed-MLE anchors, (n, H d)
    mode: str  # "uniform", "unilateral" or "point"
    horizon: int
    feature_dim: int
    uniform_radius: float = 0.0
    kappa: float = 0.0
    confidence_sets: list = field(default_factory=list, repr=False)
    diagnostics: dict = field(default_factory=dict)

    def step_params(self, which: str = "hat") -> np.ndarray:
        theta = self.theta_hat if which == "hat" else self.theta_tilde
        return theta.reshape(theta.shape[0], self.horizon, self.feature_dim)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "theta_hat": self.theta_hat.tolist(),
            "theta_tilde": self.theta_tilde.tolist(),
            "uniform_radius": self.uniform_radius,
            "kappa": self.kappa,
            "diagnostics": _jsonable(self.diagnostics),
        }


def uniform_radius(epsilon, delta, num_agents, horizon, xi_r, c1=1.0, cap=10.0) -> float:
    """``c1 * epsilon * min(exp(H + sqrt(log(n / (2 delta epsilon)))), cap) / xi_R``."""
    if epsilon == 0:
        return 0.0
    if xi_r <= 0:
        return math.inf
    growth = math.exp(horizon + math.sqrt(max(math.log(num_agents / (2 * delta * epsilon)), 0.0)))
    return c1 * epsilon * min(growth, cap) / xi_r


def uniform_reward_bounds(model: RobustRewardModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimistic and pessimistic mean rewards ``(n, H, S, J)`` over the l2 ball.

    The full radius is spent on every step and the result is clipped to what a
    parameter with ``||theta_h|| <= sqrt(d)`` can produce.
    """
    if model.mode != "uniform":
        raise ParameterError("uniform_reward_bounds needs a uniform-mode reward model")
    center = np.einsum("sjd,nhd->nhsj", features, model.step_params("tilde"))
    norms = np.linalg.norm(features, axis=-1)[None, None]
    cap = math.sqrt(features.shape[-1]) * norms
    r = model.uniform_radius
    upper = np.minimum(center + r * norms, cap) if math.isfinite(r) else np.broadcast_to(cap, center.shape)
    lower = np.maximum(center - r * norms, -cap) if math.isfinite(r) else np.broadcast_to(-cap, center.shape)
    return np.array(upper), np.array(lower)


def _trimmed_anchor(dataset, features, agent, config: LearnerConfig, H, d):
    cfg = TrimmedMleConfig(
        epsilon=config.epsilon,
        nu=config.nu,
        norm_bound=math.sqrt(H * d),
        whitening_enabled=config.whitening,
        epsilon_eff=config.epsilon_eff,
        seed=config.seed + 7919 * agent,
    )
    return trimmed_mle(dataset.feature_differences(features), dataset.labels[:, agent], cfg)


def estimate_uniform_model(D1: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig) -> RobustRewardModel:
    H, d, n = skeleton.horizon, skeleton.feature_dim, skeleton.num_agents
    fits = [_trimmed_anchor(D1, skeleton.features, i, config, H, d) for i in range(n)]
    theta = np.stack([f.theta for f in fits])
    diffs = D1.feature_differences(skeleton.features)
    second = robust_second_moment(diffs, config.epsilon)
    xi_r = smallest_nonzero_eigenvalue(second) / H
    radius = uniform_radius(config.epsilon, config.delta, n, H, xi_r, config.c1, config.radius_cap)
    return RobustRewardModel(
        theta, theta, "uniform", H, d,
        uniform_radius=radius,
        diagnostics={
            "xi_r_hat": xi_r,
            "mle_iterations": [f.iterations for f in fits],
            "mle_converged": [f.converged for f in fits],
            "mle_inliers": [len(f.inliers) for f in fits],
        },
    )


# ------------------------------------------------------------------ PGA pieces


def pga_gradient_estimate(dataset: PreferenceDataset, features: np.ndarray, epsilon: float) -> np.ndarray:
    """Concatenated ``RobMean(mu-side step-h features) - RobMean(ref-side step-h features)``.

    The value difference ``V^mu - V^mu_ref`` is linear in the reward parameter, so this
    estimate of its gradient does not depend on the current parameter or the agent.
    """
    mu_side, ref_side = dataset.step_features(features)
    return np.concatenate(
        [robust_mean(mu_side[h], epsilon) - robust_mean(ref_side[h], epsilon) for h in range(mu_side.shape[0])]
    )


def reward_est_pga(D1: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig) -> RobustRewardModel:
    H, d, n = skeleton.horizon, skeleton.feature_dim, skeleton.num_agents
    m = len(D1)
    diffs = D1.feature_differences(skeleton.features)
    kappa = config.kappa if config.kappa is not None else unilateral_kappa(config.epsilon, H, d, m, config.delta)
    grad = pga_gradient_estimate(D1, skeleton.features, config.epsilon)
    eta = config.eta1 if config.eta1 is not None else 1.0 / math.sqrt(max(config.t1, 1))
    rng = np.random.default_rng(config.seed)
    anchors, estimates, sets, ratios = [], [], [], []
    for i in range(n):
        fit = _trimmed_anchor(D1, skeleton.features, i, config, H, d)
        anchor = clamp_step_norms(fit.theta, H, d)
        cset = UnilateralSet(anchor, diffs, D1.labels[:, i].astype(float), kappa, H, d)
        anchors.append(anchor)
        sets.append(cset)
        if config.t1 == 0:
            estimates.append(anchor)
            continue
        theta = project_confidence_set(anchor + config.pga_init_scale * rng.standard_normal(anchor.shape), cset)
        total = np.zeros_like(theta)
        for _ in range(config.t1):
            theta = project_confidence_set(theta + eta * grad, cset)
            if not cset.contains(theta):
                raise EstimationError("PGA iterate left the confidence set")
            total += theta
        estimates.append(project_confidence_set(total / config.t1, cset))
        ratios.append(cset.ratio(estimates[-1]))
    return RobustRewardModel(
        np.stack(estimates), np.stack(anchors), "unilateral", H, d,
        kappa=kappa,
        confidence_sets=sets,
        diagnostics={"gradient_norm": float(np.linalg.norm(grad)), "final_ratios": ratios, "eta1": eta},
    )


# ------------------------------------------------------------------------ bonus


@dataclass(eq=False)
class BonusModel:
    Lambda: np.ndarray  # (H, d, d)
    scale: float
    lambda_reg: float
    epsilon: float

    def __post_init__(self):
        self._inv = np.linalg.inv(self.Lambda)

    def value(self, h: int, phi) -> float:
        phi = np.asarray(phi, float)
        return float(self.scale * math.sqrt(max(phi @ self._inv[h] @ phi, 0.0)))

    def table(self, features: np.ndarray) -> np.ndarray:
        """Bonus for every ``(h, s, j)``."""
        quad = np.einsum("sjd,hde,sje->hsj", features, self._inv, features)
        return self.scale * np.sqrt(np.maximum(quad, 0.0))


def bonus_scale(d, m, delta, epsilon, horizon, lam, c2=1.0, noise_scale=0.0) -> float:
    """Width of the regression confidence ellipsoid; ``poly(d)`` is taken as ``d``."""
    range_sq = (horizon * math.sqrt(d) + noise_scale) ** 2
    return math.sqrt(c2 * (range_sq * d / m + range_sq * epsilon + (2 * epsilon + lam) * horizon * math.sqrt(d)))


def build_bonus_model(D2: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig) -> BonusModel:
    H, d, m = skeleton.horizon, skeleton.feature_dim, len(D2)
    lam = config.regularizer(m, d, H)
    phi = skeleton.features[D2.states, D2.actions]  # (m, H, d)
    second = np.einsum("mhd,mhe->hde", phi, phi) / m
    Lambda = 0.6 * (second + (config.epsilon + lam) * np.eye(d))
    scale = bonus_scale(d, m, config.delta, config.epsilon, H, lam, config.c2, config.noise_scale)
    if not config.bonus_enabled:
        scale = 0.0
    return BonusModel(Lambda, scale, lam, config.epsilon)


# ------------------------------------------------------------------------ Rob-Q


@dataclass(eq=False)
class QEstimatePair:
    """Per-agent robust Q estimates; Q arrays ``(n, H, S, J)``, V arrays ``(n, H + 1, S)``."""

    q_lower: np.ndarray
    q_upper: np.ndarray
    v_lower: np.ndarray
    v_upper: np.ndarray

    def estimated_gap(self, s0: int) -> float:
        return float((self.v_upper[:, 0, s0] - self.v_lower[:, 0, s0]).sum())


def regression_norm_bound(horizon: int, h: int, d: int) -> float:
    """Largest ``||omega_h||`` consistent with ``||theta_h|| <= sqrt(d)``, values bounded by
    ``(H - h - 1) sqrt(d)`` and a next-state measure of total norm ``sqrt(d)``."""
    return math.sqrt(d) * (1 + (horizon - h - 1) * math.sqrt(d))


class _Regressor:
    """Runs the per-step robust regressions and memoizes them by their targets."""

    def __init__(self, data: TransitionData, features: np.ndarray, horizon: int, config: LearnerConfig, robust: bool = True):
        if len(data) == 0:
            raise EstimationError("no transitions to regress on")
        self.features = features
        self.horizon = horizon
        self.eps = config.epsilon if robust else 0.0
        self.reg = config.ls_reg
        self.rounds = config.ls_rounds
        self.phi = [features[data.states[:, h], data.actions[:, h]] for h in range(horizon)]
        self.cells = [(data.states[:, h], data.actions[:, h]) for h in range(horizon)]
        self.next_states = [data.states[:, h + 1] for h in range(horizon - 1)]
        self._cache: dict = {}
        self.fits = 0

    def fit(self, h: int, reward_table: np.ndarray, v_next: np.ndarray | None) -> np.ndarray:
        """Regress ``R(s_h, a_h) + V(s_{h+1})`` on ``phi(s_h, a_h)``; returns ``omega``."""
        key = (h, reward_table.tobytes(), None if v_next is None else v_next.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        s, j = self.cells[h]
        y = reward_table[s, j]
        if v_next is not None and h < self.horizon - 1:
            y = y + v_next[self.next_states[h]]
        d = self.features.shape[-1]
        res = robust_least_squares(
            self.phi[h], y, self.eps, reg=self.reg, rounds=self.rounds,
            norm_bound=regression_norm_bound(self.horizon, h, d),
        )
        self._cache[key] = res.omega
        self.fits += 1
        return res.omega


def rob_q(
    regressor: _Regressor,
    h: int,
    reward_lower: np.ndarray,
    reward_upper: np.ndarray,
    v_lower_next: np.ndarray | None,
    v_upper_next: np.ndarray | None,
    bonus: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pessimistic and optimistic Q tables ``(S, J)`` at step ``h``."""
    d = regressor.features.shape[-1]
    clip = (regressor.horizon - h) * math.sqrt(d)
    omega_lower = regressor.fit(h, reward_lower, v_lower_next)
    omega_upper = regressor.fit(h, reward_upper, v_upper_next)
    q_lower = np.clip(regressor.features @ omega_lower - bonus, -clip, clip)
    q_upper = np.clip(regressor.features @ omega_upper + bonus, -clip, clip)
    return q_lower, q_upper


def _stage_values(q_lower_h, q_upper_h, joint_h, num_actions, i):
    v_low = np.einsum("sj,sj->s", joint_h, q_lower_h)
    v_up = deviation_values(q_upper_h, others_marginal(joint_h, num_actions, i), num_actions, i).max(axis=1)
    return v_low, v_up


def robust_value_estimation(
    regressor: _Regressor,
    policy,
    reward_lower: np.ndarray,
    reward_upper: np.ndarray,
    bonus: np.ndarray,
    num_actions,
) -> QEstimatePair:
    """Backward Rob-Q for every agent against a fixed (product or correlated) policy.

    ``reward_lower``/``reward_upper`` are ``(n, H, S, J)``; ``bonus`` is ``(H, S, J)``.
    """
    n, H, S, J = reward_lower.shape
    joint = policy.joint
    q_lower = np.zeros((n, H, S, J))
    q_upper = np.zeros((n, H, S, J))
    v_lower = np.zeros((n, H + 1, S))
    v_upper = np.zeros((n, H + 1, S))
    for i in range(n):
        for h in range(H - 1, -1, -1):
            nxt = h + 1 < H
            q_lower[i, h], q_upper[i, h] = rob_q(
                regressor, h, reward_lower[i, h], reward_upper[i, h],
                v_lower[i, h + 1] if nxt else None, v_upper[i, h + 1] if nxt else None, bonus[h],
            )
            v_lower[i, h], v_upper[i, h] = _stage_values(q_lower[i, h], q_upper[i, h], joint[h], num_actions, i)
    return QEstimatePair(q_lower, q_upper, v_lower, v_upper)


# --------------------------------------------------------------------- outputs


@dataclass(eq=False)
class LearnerOutput:
    policy: object
    estimated_gap: float
    reward_model: RobustRewardModel
    diagnostics: dict = field(default_factory=dict)
    q_estimates: QEstimatePair | None = None

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "estimated_gap": self.estimated_gap,
            "reward_model": self.reward_model.to_dict(),
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def _select_policy(regressor, candidates, reward_lower, reward_upper, bonus, skeleton):
    if not candidates:
        raise ParameterError("candidate policy set is empty")
    best = None
    gaps = np.empty(len(candidates))
    for k, policy in enumerate(candidates):
        est = robust_value_estimation(regressor, policy, reward_lower, reward_upper, bonus, skeleton.num_actions)
        gaps[k] = est.estimated_gap(skeleton.initial_state)
        if best is None or gaps[k] < gaps[best[0]]:
            best = (k, est)
    return best[0], best[1], gaps


def default_candidates(skeleton: GameSkeleton, config: LearnerConfig) -> list:
    return candidate_policies(
        skeleton,
        mixture_resolution=config.mixture_resolution or None,
        budget=config.candidate_policy_budget,
        seed=config.seed,
    )


def _ne_output(k, est, gaps, candidates, model, regressor, extra=None) -> LearnerOutput:
    diag = {
        "num_candidates": len(candidates),
        "chosen_index": int(k),
        "regression_fits": regressor.fits,
    }
    diag.update(extra or {})
    return LearnerOutput(candidates[k], float(gaps[k]), model, diag, est)


def _prepare(D, skeleton, config, candidates):
    if candidates is None:
        candidates = default_candidates(skeleton, config)
    if len(candidates) == 0:
        raise ParameterError("candidate policy set is empty")
    D1, D2 = split_dataset(D, config.seed)
    return list(candidates), D1, D2


def uniform_learner(
    D: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig, candidates: Sequence | None = None
) -> LearnerOutput:
    candidates, D1, D2 = _prepare(D, skeleton, config, candidates)
    model = estimate_uniform_model(D1, skeleton, config)
    upper, lower = uniform_reward_bounds(model, skeleton.features)
    regressor = _Regressor(TransitionData.from_dataset(D2), skeleton.features, skeleton.horizon, config)
    bonus = np.zeros((skeleton.horizon, skeleton.num_states, skeleton.num_joint_actions))
    k, est, gaps = _select_policy(regressor, candidates, lower, upper, bonus, skeleton)
    return _ne_output(k, est, gaps, candidates, model, regressor)


def unilateral_learner(
    D: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig, candidates: Sequence | None = None
) -> LearnerOutput:
    candidates, D1, D2 = _prepare(D, skeleton, config, candidates)
    model = reward_est_pga(D1, skeleton, config)
    rewards = np.einsum("sjd,nhd->nhsj", skeleton.features, model.step_params())
    bonus_model = build_bonus_model(D2, skeleton, config)
    bonus = bonus_model.table(skeleton.features)
    regressor = _Regressor(TransitionData.from_dataset(D2), skeleton.features, skeleton.horizon, config)
    k, est, gaps = _select_policy(regressor, candidates, rewards, rewards, bonus, skeleton)
    extra = {"bonus_scale": bonus_model.scale, "lambda": bonus_model.lambda_reg, "max_bonus": float(bonus.max())}
    return _ne_output(k, est, gaps, candidates, model, regressor, extra)


def naive_baseline(
    D: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig, candidates: Sequence | None = None
) -> LearnerOutput:
    """Plain constrained MLE and ordinary (ridge) least squares with no bonus."""
    candidates, D1, D2 = _prepare(D, skeleton, config, candidates)
    H, d, n = skeleton.horizon, skeleton.feature_dim, skeleton.num_agents
    diffs = D1.feature_differences(skeleton.features)
    fits = [constrained_mle(diffs, D1.labels[:, i], math.sqrt(H * d)) for i in range(n)]
    theta = np.stack([f.theta for f in fits])
    model = RobustRewardModel(theta, theta, "point", H, d, diagnostics={"mle_iterations": [f.iterations for f in fits]})
    rewards = np.einsum("sjd,nhd->nhsj", skeleton.features, model.step_params())
    regressor = _Regressor(TransitionData.from_dataset(D2), skeleton.features, H, config, robust=False)
    bonus = np.zeros((H, skeleton.num_states, skeleton.num_joint_actions))
    k, est, gaps = _select_policy(regressor, candidates, rewards, rewards, bonus, skeleton)
    return _ne_output(k, est, gaps, candidates, model, regressor)


def stage_losses(q_lower_s, q_upper_s, num_actions, i, min_policies):
    """``L_i(a_dagger, a_prime) = E_{a_-i}[Qbar(a_dagger, a_-i) - Qlow(a_prime, a_-i)]`` at one state."""
    others = np.ones(1)
    for k, p in enumerate(min_policies):
        if k != i:
            others = np.outer(others, p).ravel()
    up = deviation_values(q_upper_s[None], others[None], num_actions, i)[0]
    low = deviation_values(q_lower_s[None], others[None], num_actions, i)[0]
    return up[:, None] - low[None, :]


def cce_learner(D: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig) -> LearnerOutput:
    """Backward stage-wise hedge on robust Q estimates; returns a correlated policy.

    At every ``(h, s)`` each agent runs a min-max hedge pair on its stage loss, with the
    other agents' current min-player iterates setting the expectation over ``a_-i``.
    The stage policy is the round average of the joint product of those iterates.
    """
    D1, D2 = split_dataset(D, config.seed)
    H, S, J, n = skeleton.horizon, skeleton.num_states, skeleton.num_joint_actions, skeleton.num_agents
    num_actions = skeleton.num_actions
    model = reward_est_pga(D1, skeleton, config)
    rewards = np.einsum("sjd,nhd->nhsj", skeleton.features, model.step_params())
    bonus_model = build_bonus_model(D2, skeleton, config)
    bonus = bonus_model.table(skeleton.features)
    regressor = _Regressor(TransitionData.from_dataset(D2), skeleton.features, H, config)
    eta = config.eta2 if config.eta2 is not None else default_hedge_rate(n, config.t2)

    stage = np.zeros((H, S, J))
    q_lower = np.zeros((n, H, S, J))
    q_upper = np.zeros((n, H, S, J))
    v_lower = np.zeros((n, H + 1, S))
    v_upper = np.zeros((n, H + 1, S))
    regrets = np.zeros((H, S, n))
    for h in range(H - 1, -1, -1):
        nxt = h + 1 < H
        for i in range(n):
            q_lower[i, h], q_upper[i, h] = rob_q(
                regressor, h, rewards[i, h], rewards[i, h],
                v_lower[i, h + 1] if nxt else None, v_upper[i, h + 1] if nxt else None, bonus[h],
            )
        for s in range(S):
            def losses(mins, s=s):
                return [stage_losses(q_lower[i, h, s], q_upper[i, h, s], num_actions, i, mins) for i in range(n)]

            result = optimistic_hedge(
                losses, eta, config.t2, config.hedge_variant,
                init_min=[np.full(a, 1.0 / a) for a in num_actions],
            )
            stage[h, s] = result.joint
            regrets[h, s] = result.min_regrets
        for i in range(n):
            v_lower[i, h], v_upper[i, h] = _stage_values(q_lower[i, h], q_upper[i, h], stage[h], num_actions, i)

    policy = StageCorrelatedPolicy(stage / stage.sum(axis=-1, keepdims=True), num_actions)
    est = QEstimatePair(q_lower, q_upper, v_lower, v_upper)
    diag = {
        "eta2": eta,
        "max_stage_regret": float(regrets.max()) if regrets.size else 0.0,
        "bonus_scale": bonus_model.scale,
    }
    return LearnerOutput(policy, est.estimated_gap(skeleton.initial_state), model, diag, est)


def run_learner(name: str, D: PreferenceDataset, skeleton: GameSkeleton, config: LearnerConfig, candidates=None) -> LearnerOutput:
    if name == "uniform":
        return uniform_learner(D, skeleton, config, candidates)
    if name == "unilateral":
        return unilateral_learner(D, skeleton, config, candidates)
    if name == "cce":
        return cce_learner(D, skeleton, config)
    if name == "naive_baseline":
        return naive_baseline(D, skeleton, config, candidates)
    raise ParameterError(f"unknown learner {name!r}; choose from {LEARNERS}")
