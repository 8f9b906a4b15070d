"""Finite linear Markov games, exact policy evaluation and equilibrium-gap oracles.

Conventions used throughout the package:

* ``S`` states, ``n`` agents with ``num_actions = (A_1, ..., A_n)``; a joint action
  is addressed by its row-major flat index ``j`` in ``range(J)``, ``J = prod(A_i)``.
* ``features`` has shape ``(S, J, d)``.
* ``transition_params`` has shape ``(H - 1, S, d)``: entry ``[h, s']`` is
  ``xi_h(s')``, giving ``P_h(s' | s, j) = <phi(s, j), xi_h(s')>`` for the move from
  step ``h`` to ``h + 1``.  A trajectory visits ``H`` states, so the last step has no
  transition.
* ``reward_params`` has shape ``(n, H, d)`` and mean rewards are
  ``R_{i,h}(s, j) = <phi(s, j), theta_{i,h}>``.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import ConstructionError, ModelError, ParameterError

SIMPLEX_TOL = 1e-9
NORM_TOL = 1e-9


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------- game


@dataclass(frozen=True, eq=False)
class LinearMarkovGame:
    num_actions: tuple[int, ...]
    horizon: int
    features: np.ndarray
    transition_params: np.ndarray
    reward_params: np.ndarray
    noise_scale: float = 0.0
    initial_state: int = 0
    state_names: tuple[str, ...] | None = None
    action_names: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        set_ = functools.partial(object.__setattr__, self)
        set_("num_actions", tuple(int(a) for a in self.num_actions))
        set_("horizon", int(self.horizon))
        set_("features", _frozen(self.features))
        set_("transition_params", _frozen(self.transition_params))
        set_("reward_params", _frozen(self.reward_params))
        set_("noise_scale", float(self.noise_scale))
        set_("initial_state", int(self.initial_state))
        if self.state_names is None:
            set_("state_names", tuple(f"s{k}" for k in range(self.features.shape[0])))
        else:
            set_("state_names", tuple(str(x) for x in self.state_names))
        if self.action_names is None:
            set_("action_names", tuple(tuple(f"a{k}" for k in range(a)) for a in self.num_actions))
        else:
            set_("action_names", tuple(tuple(str(x) for x in names) for names in self.action_names))
        self._validate()

    def _validate(self):
        if not self.num_actions or min(self.num_actions) < 1:
            raise ConstructionError("every agent needs at least one action")
        if self.horizon < 1:
            raise ConstructionError("horizon must be positive")
        if self.features.ndim != 3:
            raise ConstructionError("features must have shape (S, J, d)")
        S, J, d = self.features.shape
        if J != self.num_joint_actions:
            raise ConstructionError(f"features list {J} joint actions, expected {self.num_joint_actions}")
        if self.transition_params.shape != (self.horizon - 1, S, d):
            raise ConstructionError(
                f"transition_params shape {self.transition_params.shape} != {(self.horizon - 1, S, d)}"
            )
        if self.reward_params.shape != (self.num_agents, self.horizon, d):
            raise ConstructionError(
                f"reward_params shape {self.reward_params.shape} != {(self.num_agents, self.horizon, d)}"
            )
        if len(self.state_names) != S:
            raise ConstructionError("state_names length mismatch")
        if tuple(len(a) for a in self.action_names) != self.num_actions:
            raise ConstructionError("action_names length mismatch")
        if not 0 <= self.initial_state < S:
            raise ConstructionError("initial_state out of range")
        if self.noise_scale < 0:
            raise ConstructionError("noise_scale must be nonnegative")
        if np.linalg.norm(self.features, axis=-1).max() > 1 + NORM_TOL:
            raise ModelError("feature norms must not exceed 1")
        root_d = np.sqrt(d)
        if self.reward_params.size and np.linalg.norm(self.reward_params, axis=-1).max() > root_d + NORM_TOL:
            raise ModelError("reward parameter norms must not exceed sqrt(d)")
        if self.transition_params.size:
            if np.linalg.norm(self.transition_params, axis=-1).max() > root_d + NORM_TOL:
                raise ModelError("transition parameter norms must not exceed sqrt(d)")
            P = self.transitions
            if P.min() < -SIMPLEX_TOL or P.max() > 1 + SIMPLEX_TOL:
                raise ModelError("transition probabilities must lie in [0, 1]")
            if np.abs(P.sum(axis=-1) - 1).max() > SIMPLEX_TOL:
                raise ModelError("transition rows must sum to one")

    # -- sizes
    @property
    def num_agents(self) -> int:
        return len(self.num_actions)

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.num_actions))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    # -- derived tables
    @functools.cached_property
    def transitions(self) -> np.ndarray:
        """Transition kernel with shape ``(H - 1, S, J, S)``."""
        P = np.einsum("sjd,htd->hsjt", self.features, self.transition_params)
        P.setflags(write=False)
        return P

    @functools.cached_property
    def joint_action_table(self) -> np.ndarray:
        """``(J, n)`` table of per-agent actions for every flat joint index."""
        table = np.array(np.unravel_index(np.arange(self.num_joint_actions), self.num_actions)).T
        table.setflags(write=False)
        return table

    def joint_index(self, actions) -> np.ndarray | int:
        actions = np.asarray(actions)
        flat = np.ravel_multi_index(tuple(np.moveaxis(actions, -1, 0)), self.num_actions)
        return int(flat) if np.ndim(flat) == 0 else flat

    def mean_rewards(self, reward_params=None) -> np.ndarray:
        """Mean rewards with shape ``(n, H, S, J)``."""
        theta = self._check_reward_params(reward_params)
        return np.einsum("sjd,nhd->nhsj", self.features, theta)

    def _check_reward_params(self, reward_params) -> np.ndarray:
        if reward_params is None:
            return self.reward_params
        theta = np.asarray(reward_params, dtype=float)
        if theta.ndim == 2 and theta.shape[1] == self.horizon * self.feature_dim:
            theta = theta.reshape(theta.shape[0], self.horizon, self.feature_dim)
        if theta.shape != (self.num_agents, self.horizon, self.feature_dim):
            raise ConstructionError(
                f"reward params shape {theta.shape} != {(self.num_agents, self.horizon, self.feature_dim)}"
            )
        return theta

    def skeleton(self) -> "GameSkeleton":
        return GameSkeleton(
            num_actions=self.num_actions,
            horizon=self.horizon,
            features=self.features,
            initial_state=self.initial_state,
        )

    def with_reward_params(self, reward_params) -> "LinearMarkovGame":
        return LinearMarkovGame(
            num_actions=self.num_actions,
            horizon=self.horizon,
            features=self.features,
            transition_params=self.transition_params,
            reward_params=self._check_reward_params(reward_params),
            noise_scale=self.noise_scale,
            initial_state=self.initial_state,
            state_names=self.state_names,
            action_names=self.action_names,
        )

    # -- serialization
    def to_dict(self) -> dict:
        S, J, d = self.features.shape
        return {
            "num_agents": self.num_agents,
            "horizon": self.horizon,
            "states": list(self.state_names),
            "actions": [list(a) for a in self.action_names],
            "feature_dim": d,
            "features": self.features.reshape(S * J, d).tolist(),
            "transition_params": self.transition_params.tolist(),
            "reward_params": self.reward_params.tolist(),
            "noise_scale": self.noise_scale,
            "initial_state": self.initial_state,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearMarkovGame":
        actions = [list(a) for a in data["actions"]]
        num_actions = tuple(len(a) for a in actions)
        if len(num_actions) != data["num_agents"]:
            raise ConstructionError("num_agents disagrees with the action lists")
        S = len(data["states"])
        d = int(data["feature_dim"])
        H = int(data["horizon"])
        features = np.asarray(data["features"], dtype=float).reshape(S, int(np.prod(num_actions)), d)
        xi = np.asarray(data["transition_params"], dtype=float).reshape(H - 1, S, d)
        return cls(
            num_actions=num_actions,
            horizon=H,
            features=features,
            transition_params=xi,
            reward_params=np.asarray(data["reward_params"], dtype=float),
            noise_scale=data.get("noise_scale", 0.0),
            initial_state=data.get("initial_state", 0),
            state_names=data["states"],
            action_names=actions,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def content_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def save_game(game: LinearMarkovGame, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(game.to_json() + "\n", encoding="utf-8")


def load_game(path) -> LinearMarkovGame:
    return LinearMarkovGame.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True, eq=False)
class GameSkeleton:
    """What an offline learner may know about the game: spaces and features only."""

    num_actions: tuple[int, ...]
    horizon: int
    features: np.ndarray
    initial_state: int = 0

    @property
    def num_agents(self) -> int:
        return len(self.num_actions)

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.num_actions))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]


# ----------------------------------------------------------------------- policies


@dataclass(frozen=True, eq=False)
class ProductMarkovPolicy:
    """Independent per-agent Markov policies; ``probs[i]`` has shape ``(H, S, A_i)``."""

    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = tuple(_frozen(p) for p in self.probs)
        object.__setattr__(self, "probs", probs)
        shapes = {p.shape[:2] for p in probs}
        if len(shapes) != 1 or any(p.ndim != 3 for p in probs):
            raise ConstructionError("per-agent policy tables must share (H, S)")
        for p in probs:
            _check_simplex(p)

    @property
    def num_actions(self) -> tuple[int, ...]:
        return tuple(p.shape[2] for p in self.probs)

    @property
    def horizon(self) -> int:
        return self.probs[0].shape[0]

    @property
    def num_states(self) -> int:
        return self.probs[0].shape[1]

    @functools.cached_property
    def joint(self) -> np.ndarray:
        """Joint action distribution per ``(h, s)`` with shape ``(H, S, J)``."""
        H, S = self.probs[0].shape[:2]
        out = np.ones((H, S, 1))
        for p in self.probs:
            out = (out[..., :, None] * p[..., None, :]).reshape(H, S, -1)
        out.setflags(write=False)
        return out

    @classmethod
    def uniform(cls, num_actions, horizon, num_states) -> "ProductMarkovPolicy":
        return cls(tuple(np.full((horizon, num_states, a), 1.0 / a) for a in num_actions))

    @classmethod
    def deterministic(cls, choices: Sequence[np.ndarray], num_actions) -> "ProductMarkovPolicy":
        """``choices[i]`` is an integer ``(H, S)`` table of the action agent ``i`` takes."""
        return cls(tuple(np.eye(a)[np.asarray(c, dtype=int)] for c, a in zip(choices, num_actions)))

    @classmethod
    def stationary(cls, dists: Sequence, horizon, num_states) -> "ProductMarkovPolicy":
        """Same action distribution for every step and state."""
        return cls(tuple(np.broadcast_to(np.asarray(p, float), (horizon, num_states, len(p))) for p in dists))

    def with_agent(self, i: int, probs_i) -> "ProductMarkovPolicy":
        probs = list(self.probs)
        probs[i] = np.asarray(probs_i, float)
        return ProductMarkovPolicy(tuple(probs))

    def to_correlated(self) -> "StageCorrelatedPolicy":
        return StageCorrelatedPolicy(self.joint, self.num_actions)

    def to_dict(self) -> dict:
        return {"kind": "product", "probs": [p.tolist() for p in self.probs]}


@dataclass(frozen=True, eq=False)
class StageCorrelatedPolicy:
    """Per-step joint action distributions; ``probs`` has shape ``(H, S, J)``."""

    probs: np.ndarray
    num_actions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))
        object.__setattr__(self, "num_actions", tuple(int(a) for a in self.num_actions))
        if self.probs.ndim != 3 or self.probs.shape[2] != int(np.prod(self.num_actions)):
            raise ConstructionError("correlated policy must have shape (H, S, J)")
        _check_simplex(self.probs)

    @property
    def joint(self) -> np.ndarray:
        return self.probs

    @property
    def horizon(self) -> int:
        return self.probs.shape[0]

    @property
    def num_states(self) -> int:
        return self.probs.shape[1]

    def marginal(self, i: int) -> np.ndarray:
        """Agent ``i``'s marginal action distribution, shape ``(H, S, A_i)``."""
        H, S, _ = self.probs.shape
        tensor = self.probs.reshape(H, S, *self.num_actions)
        axes = tuple(2 + k for k in range(len(self.num_actions)) if k != i)
        return tensor.sum(axis=axes)

    def to_dict(self) -> dict:
        return {"kind": "correlated", "num_actions": list(self.num_actions), "probs": self.probs.tolist()}


Policy = Union[ProductMarkovPolicy, StageCorrelatedPolicy]


def policy_from_dict(data: dict) -> Policy:
    if data["kind"] == "product":
        return ProductMarkovPolicy(tuple(np.asarray(p, float) for p in data["probs"]))
    if data["kind"] == "correlated":
        return StageCorrelatedPolicy(np.asarray(data["probs"], float), tuple(data["num_actions"]))
    raise ConstructionError(f"unknown policy kind {data['kind']!r}")


def _check_simplex(p: np.ndarray) -> None:
    if p.min() < -SIMPLEX_TOL or np.abs(p.sum(axis=-1) - 1).max() > SIMPLEX_TOL:
        raise ModelError("policy rows must be probability distributions")


def _check_policy(game, policy: Policy) -> np.ndarray:
    if policy.horizon != game.horizon or policy.num_states != game.num_states:
        raise ConstructionError("policy (H, S) does not match the game")
    if tuple(policy.num_actions) != tuple(game.num_actions):
        raise ConstructionError("policy action sets do not match the game")
    return policy.joint


def others_marginal(joint_h: np.ndarray, num_actions, i: int) -> np.ndarray:
    """Marginalize agent ``i`` out of ``(S, J)`` joint probabilities -> ``(S, J_{-i})``."""
    S = joint_h.shape[0]
    tensor = joint_h.reshape(S, *num_actions)
    return tensor.sum(axis=1 + i).reshape(S, -1)


def deviation_values(q_h: np.ndarray, others: np.ndarray, num_actions, i: int) -> np.ndarray:
    """``E_{a_{-i} ~ others}[q(s, a_i, a_{-i})]`` for every ``(s, a_i)``; ``q_h`` is ``(S, J)``."""
    S = q_h.shape[0]
    tensor = np.moveaxis(q_h.reshape(S, *num_actions), 1 + i, -1).reshape(S, -1, num_actions[i])
    return np.einsum("sja,sj->sa", tensor, others)


# --------------------------------------------------------------------- evaluation


@dataclass(frozen=True, eq=False)
class ValueTable:
    """``V`` has shape ``(n, H + 1, S)`` with ``V[:, H] == 0``; ``Q`` has shape ``(n, H, S, J)``."""

    V: np.ndarray
    Q: np.ndarray | None = None

    def initial(self, s0: int) -> np.ndarray:
        return self.V[:, 0, s0]


def evaluate_policy(game: LinearMarkovGame, policy: Policy, reward_params=None) -> ValueTable:
    """Exact backward-induction values of ``policy`` under mean rewards (no noise)."""
    joint = _check_policy(game, policy)
    R = game.mean_rewards(reward_params)
    n, H, S = game.num_agents, game.horizon, game.num_states
    V = np.zeros((n, H + 1, S))
    Q = np.zeros((n, H, S, game.num_joint_actions))
    for h in range(H - 1, -1, -1):
        Q[:, h] = R[:, h]
        if h < H - 1:
            Q[:, h] += np.einsum("sjt,nt->nsj", game.transitions[h], V[:, h + 1])
        V[:, h] = np.einsum("sj,nsj->ns", joint[h], Q[:, h])
    return ValueTable(V, Q)


@dataclass(frozen=True)
class BestResponse:
    """Value table ``(H + 1, S)`` of agent ``i``'s best response and the response itself."""

    values: np.ndarray
    actions: np.ndarray  # (H, S) greedy action of the deviator

    @property
    def value_tables(self):
        return self.values


def best_response(game: LinearMarkovGame, policy: Policy, i: int, reward_params_i=None) -> BestResponse:
    """Single-agent DP for agent ``i`` against the others' (marginal) behavior.

    The deviator observes only the current state; against a stage-correlated policy the
    others' actions are drawn from the stage distribution with agent ``i`` marginalized
    out, i.e. the deviation is independent of the correlation device.
    """
    if not 0 <= i < game.num_agents:
        raise ParameterError(f"agent index {i} out of range")
    joint = _check_policy(game, policy)
    if reward_params_i is None:
        theta_i = game.reward_params[i]
    else:
        theta_i = np.asarray(reward_params_i, float).reshape(game.horizon, game.feature_dim)
    R = np.einsum("sjd,hd->hsj", game.features, theta_i)
    H, S = game.horizon, game.num_states
    V = np.zeros((H + 1, S))
    actions = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        q = R[h].copy()
        if h < H - 1:
            q += game.transitions[h] @ V[h + 1]
        dev = deviation_values(q, others_marginal(joint[h], game.num_actions, i), game.num_actions, i)
        actions[h] = dev.argmax(axis=1)
        V[h] = dev.max(axis=1)
    return BestResponse(V, actions)


def best_response_value(game: LinearMarkovGame, policy: Policy, i: int, reward_params_i=None) -> float:
    return float(best_response(game, policy, i, reward_params_i).values[0, game.initial_state])


@dataclass(frozen=True)
class GapReport:
    best_response_values: tuple[float, ...]
    policy_values: tuple[float, ...]
    total_gap: float

    @property
    def per_agent_gaps(self) -> tuple[float, ...]:
        return tuple(b - v for b, v in zip(self.best_response_values, self.policy_values))

    def to_dict(self) -> dict:
        return {
            "best_response_values": list(self.best_response_values),
            "policy_values": list(self.policy_values),
            "per_agent_gaps": list(self.per_agent_gaps),
            "total_gap": self.total_gap,
        }


def _gap_report(game, policy, reward_params) -> GapReport:
    theta = game._check_reward_params(reward_params)
    values = evaluate_policy(game, policy, theta).initial(game.initial_state)
    br = tuple(best_response_value(game, policy, i, theta[i]) for i in range(game.num_agents))
    pv = tuple(float(v) for v in values)
    return GapReport(br, pv, float(sum(b - v for b, v in zip(br, pv))))


def nash_gap(game: LinearMarkovGame, policy: ProductMarkovPolicy, reward_params=None) -> GapReport:
    if not isinstance(policy, ProductMarkovPolicy):
        raise ParameterError("nash_gap needs a product policy; use cce_gap for correlated policies")
    return _gap_report(game, policy, reward_params)


def cce_gap(game: LinearMarkovGame, policy: Policy, reward_params=None) -> GapReport:
    if isinstance(policy, ProductMarkovPolicy):
        policy = policy.to_correlated()
    return _gap_report(game, policy, reward_params)


# ------------------------------------------------------------------ enumeration


def num_deterministic_policies(game) -> int:
    cells = game.horizon * game.num_states
    return int(np.prod([a**cells for a in game.num_actions]))


def agent_deterministic_tables(num_actions_i: int, horizon: int, num_states: int) -> Iterator[np.ndarray]:
    """All ``(H, S)`` action tables of one agent, in lexicographic order."""
    for combo in itertools.product(range(num_actions_i), repeat=horizon * num_states):
        yield np.array(combo, dtype=int).reshape(horizon, num_states)


def deterministic_product_policies(game) -> Iterator[ProductMarkovPolicy]:
    per_agent = [list(agent_deterministic_tables(a, game.horizon, game.num_states)) for a in game.num_actions]
    for choice in itertools.product(*per_agent):
        yield ProductMarkovPolicy.deterministic(choice, game.num_actions)


def deviate(policy: Policy, i: int, table: np.ndarray, num_actions) -> StageCorrelatedPolicy:
    """Joint policy where agent ``i`` plays the deterministic ``table`` and the rest keep
    their (marginal) behavior, independently of agent ``i``."""
    joint = policy.joint
    H, S, _ = joint.shape
    out = np.zeros((H, S) + tuple(num_actions))
    for h in range(H):
        others = others_marginal(joint[h], num_actions, i).reshape((S,) + tuple(np.delete(num_actions, i)))
        onehot = np.eye(num_actions[i])[table[h]]  # (S, A_i)
        t = np.moveaxis(onehot[..., None] * others.reshape(S, 1, -1), 1, -1)  # (S, J_-i, A_i)
        t = t.reshape((S,) + tuple(np.delete(num_actions, i)) + (num_actions[i],))
        out[h] = np.moveaxis(t, -1, 1 + i)
    return StageCorrelatedPolicy(out.reshape(H, S, -1), num_actions)


def brute_force_best_response_value(game, policy: Policy, i: int, reward_params=None) -> float:
    """Max over all ``|A_i|^(S*H)`` deterministic Markov deviations, each evaluated exactly."""
    theta = game._check_reward_params(reward_params)
    best = -np.inf
    for table in agent_deterministic_tables(game.num_actions[i], game.horizon, game.num_states):
        dev = deviate(policy, i, table, game.num_actions)
        best = max(best, float(evaluate_policy(game, dev, theta).V[i, 0, game.initial_state]))
    return best


def brute_force_gap(game, policy: Policy, reward_params=None) -> float:
    theta = game._check_reward_params(reward_params)
    values = evaluate_policy(game, policy, theta).initial(game.initial_state)
    return float(
        sum(brute_force_best_response_value(game, policy, i, theta) - values[i] for i in range(game.num_agents))
    )


def simplex_grid(num_actions_i: int, resolution: int) -> list[np.ndarray]:
    """All distributions over ``num_actions_i`` actions with entries in ``{k / resolution}``."""
    points = []
    for combo in itertools.product(range(resolution + 1), repeat=num_actions_i - 1):
        if sum(combo) <= resolution:
            points.append(np.array(list(combo) + [resolution - sum(combo)], float) / resolution)
    return points


def candidate_policies(
    game,
    mixture_resolution: int | None = None,
    budget: int = 100_000,
    seed: int = 0,
    extra: Sequence[ProductMarkovPolicy] = (),
) -> list[ProductMarkovPolicy]:
    """Finite stand-in for the product policy class used by the NE learners.

    All deterministic Markov product policies when there are at most ``budget`` of them,
    otherwise a seeded random sample of ``budget``; plus stationary mixtures on a simplex
    grid of the given resolution and any user-supplied policies.
    """
    if num_deterministic_policies(game) <= budget:
        out = list(deterministic_product_policies(game))
    else:
        rng = np.random.default_rng(seed)
        cells = (game.horizon, game.num_states)
        out = [
            ProductMarkovPolicy.deterministic([rng.integers(a, size=cells) for a in game.num_actions], game.num_actions)
            for _ in range(budget)
        ]
    if mixture_resolution:
        grids = [simplex_grid(a, mixture_resolution) for a in game.num_actions]
        for dists in itertools.product(*grids):
            if all(d.max() == 1.0 for d in dists):
                continue  # already among the deterministic policies
            out.append(ProductMarkovPolicy.stationary(dists, game.horizon, game.num_states))
    out.extend(extra)
    return out


def pure_nash_equilibria(game, reward_params=None, tol: float = 1e-8) -> list[ProductMarkovPolicy]:
    return [p for p in deterministic_product_policies(game) if nash_gap(game, p, reward_params).total_gap <= tol]


# ----------------------------------------------------------------------- sampling


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``(H,)`` and per-agent actions ``(H, n)`` of one episode with its feature sum."""

    states: np.ndarray
    actions: np.ndarray
    feature_sum: np.ndarray

    @classmethod
    def from_indices(cls, game, states, actions) -> "Trajectory":
        states = _frozen(states, int)
        actions = _frozen(np.reshape(actions, (len(states), game.num_agents)), int)
        joint = game.joint_index(actions)
        return cls(states, actions, _frozen(game.features[states, joint].sum(axis=0)))

    def __len__(self) -> int:
        return len(self.states)

    def pairs(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(int(s), tuple(int(a) for a in act)) for s, act in zip(self.states, self.actions)]


def _sample_categorical(rng, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws, one per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)


def sample_joint_trajectories(game, policy: Policy, num: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rollouts; returns states and flat joint actions, both ``(num, H)``."""
    joint = _check_policy(game, policy)
    H = game.horizon
    states = np.empty((num, H), dtype=int)
    acts = np.empty((num, H), dtype=int)
    s = np.full(num, game.initial_state)
    for h in range(H):
        states[:, h] = s
        acts[:, h] = _sample_categorical(rng, joint[h, s])
        if h < H - 1:
            s = _sample_categorical(rng, game.transitions[h, s, acts[:, h]])
    return states, acts


def sample_trajectory(game, policy: Policy, rng_seed) -> Trajectory:
    states, acts = sample_joint_trajectories(game, policy, 1, np.random.default_rng(rng_seed))
    return Trajectory.from_indices(game, states[0], game.joint_action_table[acts[0]])


# ---------------------------------------------------------------------- coverage


def occupancy(game, policy: Policy) -> np.ndarray:
    """``d_h(s, j)`` state-joint-action occupancy, shape ``(H, S, J)``."""
    joint = _check_policy(game, policy)
    H, S = game.horizon, game.num_states
    occ = np.zeros((H, S, game.num_joint_actions))
    p = np.zeros(S)
    p[game.initial_state] = 1.0
    for h in range(H):
        occ[h] = p[:, None] * joint[h]
        if h < H - 1:
            p = np.einsum("sj,sjt->t", occ[h], game.transitions[h])
    return occ


def trajectory_feature_moments(game, policy: Policy, concatenated: bool = False):
    """Exact first and second moments of the trajectory feature vector.

    With ``concatenated=False`` the vector is ``sum_h phi(s_h, a_h)`` (length ``d``);
    otherwise the per-step features are stacked into a length ``H * d`` vector.
    """
    joint = _check_policy(game, policy)
    H, S, d = game.horizon, game.num_states, game.feature_dim
    D = H * d if concatenated else d
    p = np.zeros(S)
    p[game.initial_state] = 1.0
    m = np.zeros((S, D))
    M = np.zeros((S, D, D))
    for h in range(H):
        if concatenated:
            f = np.zeros(game.features.shape[:2] + (D,))
            f[..., h * d:(h + 1) * d] = game.features
        else:
            f = game.features
        a = joint[h]
        pj = p[:, None] * a
        mj = a[..., None] * m[:, None, :] + pj[..., None] * f
        cross = m[:, None, :, None] * f[..., None, :]
        Mj = (
            a[..., None, None] * (M[:, None] + cross + np.swapaxes(cross, -1, -2))
            + pj[..., None, None] * f[..., :, None] * f[..., None, :]
        )
        if h < H - 1:
            P = game.transitions[h]
            p = np.einsum("sj,sjt->t", pj, P)
            m = np.einsum("sjD,sjt->tD", mj, P)
            M = np.einsum("sjDE,sjt->tDE", Mj, P)
        else:
            return mj.sum(axis=(0, 1)), Mj.sum(axis=(0, 1))
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class CoverageMatrices:
    sigma_mu: np.ndarray  # (H, d, d)
    sigma_diff: np.ndarray  # (d, d), or (Hd, Hd) when concatenated


def difference_covariance(game, rho: Policy, rho_ref: Policy, concatenated: bool = False) -> np.ndarray:
    m1, M1 = trajectory_feature_moments(game, rho, concatenated)
    m2, M2 = trajectory_feature_moments(game, rho_ref, concatenated)
    return M1 + M2 - np.outer(m1, m2) - np.outer(m2, m1)


def step_covariances(game, policy: Policy) -> np.ndarray:
    occ = occupancy(game, policy)
    return np.einsum("hsj,sjd,sje->hde", occ, game.features, game.features)


def coverage_matrices(game, mu: Policy, mu_ref: Policy, concatenated: bool = False) -> CoverageMatrices:
    return CoverageMatrices(step_covariances(game, mu), difference_covariance(game, mu, mu_ref, concatenated))


def psd_dominance_constant(A: np.ndarray, B: np.ndarray, tol: float = 1e-10) -> float:
    """Largest ``c >= 0`` with ``A - c B`` positive semidefinite (``inf`` if ``B == 0``)."""
    wa, Ua = np.linalg.eigh((A + A.T) / 2)
    scale = max(abs(wa).max(), np.abs(B).max(), 1.0)
    keep = wa > tol * scale
    null_a = Ua[:, ~keep]
    if null_a.size and np.abs(null_a.T @ B @ null_a).max() > tol * scale:
        return 0.0
    if not keep.any():
        return np.inf if np.abs(B).max() <= tol * scale else 0.0
    whiten = Ua[:, keep] / np.sqrt(wa[keep])
    top = np.linalg.eigvalsh(whiten.T @ B @ whiten).max()
    return np.inf if top <= tol else float(1.0 / top)


def smallest_eigenvalue(A: np.ndarray) -> float:
    return float(np.linalg.eigvalsh((A + A.T) / 2).min())


def smallest_nonzero_eigenvalue(A: np.ndarray, rel_tol: float = 1e-8) -> float:
    w = np.linalg.eigvalsh((A + A.T) / 2)
    w = w[w > rel_tol * max(w.max(), 1e-300)]
    return float(w.min()) if w.size else 0.0


@dataclass(frozen=True)
class CoverageReport:
    xi_R: float
    xi_P: float
    xi_R_identifiable: float
    C_R: float
    C_P: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def coverage_report(game, mu: ProductMarkovPolicy, mu_ref: ProductMarkovPolicy, pi_star: ProductMarkovPolicy | None = None) -> CoverageReport:
    """Uniform coverage constants and, given an equilibrium, unilateral ones.

    Unilateral constants are minimized over all deterministic Markov deviations of each
    agent from ``pi_star``.
    """
    cov = coverage_matrices(game, mu, mu_ref)
    H = game.horizon
    xi_P = min(smallest_eigenvalue(c) for c in cov.sigma_mu)
    xi_R = smallest_eigenvalue(cov.sigma_diff) / H
    xi_R_id = smallest_nonzero_eigenvalue(cov.sigma_diff) / H
    C_R = C_P = np.nan
    if pi_star is not None:
        C_R = C_P = np.inf
        behaviors = (mu, mu_ref)
        for i in range(game.num_agents):
            for table in agent_deterministic_tables(game.num_actions[i], H, game.num_states):
                dev = deviate(pi_star, i, table, game.num_actions)
                for rho_ref in behaviors:
                    target = difference_covariance(game, dev, rho_ref)
                    for rho in behaviors:
                        C_R = min(C_R, psd_dominance_constant(difference_covariance(game, rho, rho_ref), target))
                dev_cov = step_covariances(game, dev)
                for h in range(H):
                    C_P = min(C_P, psd_dominance_constant(cov.sigma_mu[h], dev_cov[h]))
    return CoverageReport(xi_R, xi_P, xi_R_id, C_R, C_P)


# ---------------------------------------------------------------- identifiability


def reachable_states(game) -> np.ndarray:
    """``(H, S)`` mask of states some policy reaches with positive probability."""
    H, S = game.horizon, game.num_states
    mask = np.zeros((H, S), bool)
    mask[0, game.initial_state] = True
    for h in range(H - 1):
        mask[h + 1] = (game.transitions[h][mask[h]] > SIMPLEX_TOL).any(axis=(0, 1))
    return mask


def identifiable_projection(features: np.ndarray) -> np.ndarray:
    """Projector onto ``span{phi(x) - phi(y)}`` over the given feature rows.

    Components outside this span shift every reward of those rows by one constant and
    so leave value differences, gaps and preference probabilities unchanged.
    """
    flat = features.reshape(-1, features.shape[-1])
    centered = flat - flat.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[sv > 1e-10 * max(sv.max(initial=0.0), 1e-300)]
    return basis.T @ basis


def canonical_reward_params(game, reward_params=None) -> np.ndarray:
    """Per step, project each agent's parameter onto the feature differences of the
    reachable state-actions: the part of the reward that preference data can identify."""
    theta = np.array(game.reward_params if reward_params is None else reward_params, dtype=float)
    reach = reachable_states(game)
    for h in range(game.horizon):
        proj = identifiable_projection(game.features[reach[h]])
        theta[:, h] = theta[:, h] @ proj
    return theta
