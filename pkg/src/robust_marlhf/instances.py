"""Game generators and the fixed reference games shipped with the package."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .game import (
    LinearMarkovGame,
    ProductMarkovPolicy,
    canonical_reward_params,
    load_game,
    nash_gap,
    pure_nash_equilibria,
    policy_from_dict,
)

REFERENCE_GAMES = ("identical_interest", "zero_sum", "general_sum")


def tabular_game(
    transitions: np.ndarray,
    rewards: np.ndarray,
    num_actions,
    noise_scale: float = 0.0,
    initial_state: int = 0,
    canonical: bool = True,
    **names,
) -> LinearMarkovGame:
    """One-hot linear game from explicit tables.

    ``transitions`` is ``(H - 1, S, J, S)`` and ``rewards`` is ``(n, H, S, J)``.  Each
    joint state-action gets its own unit feature, so ``d = S * J``.
    """
    rewards = np.asarray(rewards, float)
    n, H, S, J = rewards.shape
    d = S * J
    features = np.eye(d).reshape(S, J, d)
    P = np.asarray(transitions, float).reshape(H - 1, S * J, S)
    xi = np.transpose(P, (0, 2, 1))  # xi_h(s')[s*J + j] = P_h(s' | s, j)
    game = LinearMarkovGame(
        num_actions=num_actions,
        horizon=H,
        features=features,
        transition_params=xi,
        reward_params=np.zeros((n, H, d)),
        noise_scale=noise_scale,
        initial_state=initial_state,
        **names,
    )
    theta = rewards.reshape(n, H, d)
    return game.with_reward_params(canonical_reward_params(game, theta) if canonical else theta)


def random_tabular_game(num_states, num_actions, horizon, seed, reward_scale=1.0, canonical=True) -> LinearMarkovGame:
    rng = np.random.default_rng(seed)
    J = int(np.prod(num_actions))
    P = rng.dirichlet(np.ones(num_states), size=(horizon - 1, num_states, J))
    R = rng.uniform(-reward_scale, reward_scale, size=(len(num_actions), horizon, num_states, J))
    return tabular_game(P, R, num_actions, canonical=canonical)


def random_feature_game(
    num_states, num_actions, horizon, feature_dim, seed, concentration=1.0, canonical=True
) -> LinearMarkovGame:
    """Low-rank game: features are points of the ``d``-simplex and each coordinate owns a
    next-state distribution, so ``P_h(. | s, a) = sum_k phi_k(s, a) nu_{h,k}``."""
    rng = np.random.default_rng(seed)
    J = int(np.prod(num_actions))
    n = len(num_actions)
    features = rng.dirichlet(np.full(feature_dim, concentration), size=(num_states, J))
    nu = rng.dirichlet(np.ones(num_states), size=(horizon - 1, feature_dim))  # (H-1, d, S)
    xi = np.transpose(nu, (0, 2, 1))
    game = LinearMarkovGame(
        num_actions=num_actions,
        horizon=horizon,
        features=features,
        transition_params=xi,
        reward_params=np.zeros((n, horizon, feature_dim)),
    )
    theta = rng.uniform(-1, 1, size=(n, horizon, feature_dim))
    return game.with_reward_params(canonical_reward_params(game, theta) if canonical else theta)


# ---------------------------------------------------------------- reference games


def _identical_interest() -> LinearMarkovGame:
    # Coordination game: the (0, 0) convention pays most now, (1, 1) steers to the
    # richer state.  Both agents share the reward.
    stage = np.array(
        [
            [1.0, 0.0, 0.0, 0.6],  # s0
            [0.2, 0.0, 0.0, 0.9],  # s1
        ]
    )
    R = 3.0 * np.stack([stage, 0.8 * stage])  # (H, S, J)
    P = np.array(
        [
            [[0.7, 0.3], [0.5, 0.5], [0.5, 0.5], [0.2, 0.8]],
            [[0.6, 0.4], [0.5, 0.5], [0.5, 0.5], [0.3, 0.7]],
        ]
    )[None]
    return tabular_game(
        P, np.stack([R, R]), (2, 2), state_names=("s0", "s1"), action_names=(("a", "b"), ("a", "b"))
    )


def _zero_sum() -> LinearMarkovGame:
    # Matching pennies at every step; the single state always transitions to itself.
    stage = np.array([[1.0, -1.0, -1.0, 1.0]])
    R1 = np.stack([stage, stage])
    P = np.ones((1, 1, 4, 1))
    return tabular_game(
        P, np.stack([R1, -R1]), (2, 2), state_names=("s0",), action_names=(("heads", "tails"), ("heads", "tails"))
    )


def _general_sum() -> LinearMarkovGame:
    # Battle-of-the-sexes flavour in s0, a prisoner's dilemma in s1.
    r1 = np.array([[0.9, 0.0, 0.1, 0.5], [0.6, -0.4, 0.9, -0.1]])
    r2 = np.array([[0.5, 0.1, 0.0, 0.9], [0.6, 0.9, -0.4, -0.1]])
    P = np.array(
        [
            [[0.8, 0.2], [0.3, 0.7], [0.4, 0.6], [0.6, 0.4]],
            [[0.5, 0.5], [0.2, 0.8], [0.7, 0.3], [0.9, 0.1]],
        ]
    )[None]
    R = 2.0 * np.stack([np.stack([r1, r1]), np.stack([r2, r2])])
    return tabular_game(
        P, R, (2, 2), state_names=("s0", "s1"), action_names=(("x", "y"), ("x", "y"))
    )


_BUILDERS = {"identical_interest": _identical_interest, "zero_sum": _zero_sum, "general_sum": _general_sum}


def build_reference_game(name: str) -> LinearMarkovGame:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown reference game {name!r}; choose from {REFERENCE_GAMES}") from None


def equilibrium_candidates(game: LinearMarkovGame) -> list[ProductMarkovPolicy]:
    """Pure Markov NE found by enumeration, plus the uniform policy when it is an NE."""
    found = pure_nash_equilibria(game)
    uniform = ProductMarkovPolicy.uniform(game.num_actions, game.horizon, game.num_states)
    if nash_gap(game, uniform).total_gap <= 1e-8:
        found.append(uniform)
    return found


def write_reference_files(directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in REFERENCE_GAMES:
        game = build_reference_game(name)
        (directory / f"{name}.json").write_text(game.to_json() + "\n", encoding="utf-8")
        truth = {
            "game_hash": game.content_hash(),
            "equilibria": [p.to_dict() for p in equilibrium_candidates(game)],
        }
        (directory / f"{name}.truth.json").write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")


def _reference_path(filename: str):
    return resources.files("robust_marlhf") / "reference" / filename


def load_reference_game(name: str) -> LinearMarkovGame:
    with resources.as_file(_reference_path(f"{name}.json")) as path:
        return load_game(path)


def load_reference_equilibria(name: str) -> list[ProductMarkovPolicy]:
    data = json.loads(_reference_path(f"{name}.truth.json").read_text(encoding="utf-8"))
    return [policy_from_dict(p) for p in data["equilibria"]]
