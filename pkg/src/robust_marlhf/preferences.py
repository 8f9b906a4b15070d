"""Bradley-Terry preference datasets over trajectory pairs, and contamination attackers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConstructionError, ParameterError
from .game import LinearMarkovGame, Policy, Trajectory, occupancy, sample_joint_trajectories

ATTACKERS = ("label_flip_random", "label_flip_targeted", "trajectory_substitution", "feature_outlier")


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def bt_preference_prob(tau: Trajectory, tau_prime: Trajectory, theta_i, game: LinearMarkovGame) -> float:
    """Probability that ``tau`` is preferred to ``tau_prime`` for an agent with ``theta_i``.

    ``theta_i`` may be per-step ``(H, d)`` or concatenated ``(H * d,)``.
    """
    theta = np.asarray(theta_i, float).reshape(game.horizon, game.feature_dim)
    ret = np.einsum("hd,hd->", game.features[tau.states, game.joint_index(tau.actions)], theta)
    ret_prime = np.einsum("hd,hd->", game.features[tau_prime.states, game.joint_index(tau_prime.actions)], theta)
    return float(sigmoid(ret - ret_prime))


@dataclass(frozen=True)
class PreferenceSample:
    tau: Trajectory
    tau_prime: Trajectory
    labels: tuple[int, ...]
    corrupted_flag: bool = False


@dataclass(frozen=True, eq=False)
class CorruptionTruth:
    """Evaluation-only bookkeeping: which samples were modified and what they were."""

    corrupted: np.ndarray  # (m,) bool
    clean_states: np.ndarray
    clean_actions: np.ndarray
    clean_states_ref: np.ndarray
    clean_actions_ref: np.ndarray
    clean_labels: np.ndarray
    attacker: str = "none"
    epsilon: float = 0.0

    @property
    def num_corrupted(self) -> int:
        return int(self.corrupted.sum())


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """``m`` labelled trajectory pairs stored column-wise.

    ``states``/``states_ref`` are ``(m, H)`` state indices of the ``mu``-side and
    ``mu_ref``-side trajectories, ``actions``/``actions_ref`` the flat joint-action
    indices ``(m, H)`` and ``labels`` the ``(m, n)`` matrix of +-1 votes.  ``truth`` is
    only populated by the generator and the attackers; learners never look at it.
    """

    num_actions: tuple[int, ...]
    states: np.ndarray
    actions: np.ndarray
    states_ref: np.ndarray
    actions_ref: np.ndarray
    labels: np.ndarray
    epsilon_budget: float = 0.0
    provenance: dict = field(default_factory=dict)
    truth: CorruptionTruth | None = None

    def __post_init__(self):
        object.__setattr__(self, "num_actions", tuple(int(a) for a in self.num_actions))
        for name in ("states", "actions", "states_ref", "actions_ref", "labels"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = self.states.shape[0]
        if self.states.ndim != 2 or any(
            getattr(self, k).shape != self.states.shape for k in ("actions", "states_ref", "actions_ref")
        ):
            raise ConstructionError("trajectory arrays must all be (m, H)")
        if self.labels.shape != (m, len(self.num_actions)):
            raise ConstructionError("labels must be (m, n)")
        if not np.isin(self.labels, (-1, 1)).all():
            raise ConstructionError("labels must be +1 or -1")
        if not 0 <= self.epsilon_budget < 0.5:
            raise ParameterError("epsilon budget must lie in [0, 1/2)")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def num_samples(self) -> int:
        return len(self)

    @property
    def num_agents(self) -> int:
        return len(self.num_actions)

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def _trajectory(self, game, states, actions) -> Trajectory:
        return Trajectory.from_indices(game, states, game.joint_action_table[actions])

    def sample(self, k: int, game: LinearMarkovGame) -> PreferenceSample:
        flag = bool(self.truth.corrupted[k]) if self.truth is not None else False
        return PreferenceSample(
            self._trajectory(game, self.states[k], self.actions[k]),
            self._trajectory(game, self.states_ref[k], self.actions_ref[k]),
            tuple(int(o) for o in self.labels[k]),
            flag,
        )

    def subset(self, index) -> "PreferenceDataset":
        index = np.asarray(index, dtype=int)
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = replace(
                t,
                corrupted=t.corrupted[index],
                clean_states=t.clean_states[index],
                clean_actions=t.clean_actions[index],
                clean_states_ref=t.clean_states_ref[index],
                clean_actions_ref=t.clean_actions_ref[index],
                clean_labels=t.clean_labels[index],
            )
        return replace(
            self,
            states=self.states[index],
            actions=self.actions[index],
            states_ref=self.states_ref[index],
            actions_ref=self.actions_ref[index],
            labels=self.labels[index],
            truth=truth,
        )

    def without_truth(self) -> "PreferenceDataset":
        return replace(self, truth=None)

    # -- feature views
    def step_features(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-step features of both sides, each ``(H, m, d)``."""
        return (
            np.swapaxes(features[self.states, self.actions], 0, 1),
            np.swapaxes(features[self.states_ref, self.actions_ref], 0, 1),
        )

    def feature_differences(self, features: np.ndarray) -> np.ndarray:
        """Concatenated per-step differences ``phi(tau) - phi(tau')``, shape ``(m, H * d)``."""
        diff = features[self.states, self.actions] - features[self.states_ref, self.actions_ref]
        return diff.reshape(len(self), diff.shape[1] * diff.shape[2])

    def feature_sum_differences(self, features: np.ndarray) -> np.ndarray:
        diff = features[self.states, self.actions] - features[self.states_ref, self.actions_ref]
        return diff.sum(axis=1)


def per_step_feature_views(dataset: PreferenceDataset, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return dataset.step_features(features)


def empirical_difference_covariance(dataset: PreferenceDataset, features: np.ndarray) -> np.ndarray:
    diff = dataset.feature_sum_differences(features)
    return diff.T @ diff / len(dataset)


# --------------------------------------------------------------------- generation


def preference_probabilities(game: LinearMarkovGame, dataset: PreferenceDataset, reward_params=None) -> np.ndarray:
    """``P(o_i = +1)`` for every sample and agent, shape ``(m, n)``."""
    theta = game._check_reward_params(reward_params).reshape(game.num_agents, -1)
    return sigmoid(dataset.feature_differences(game.features) @ theta.T)


def generate_clean_dataset(
    game: LinearMarkovGame, mu: Policy, mu_ref: Policy, m: int, rng_seed, epsilon_budget: float = 0.0, policy_ids=("mu", "mu_ref")
) -> PreferenceDataset:
    if m < 1:
        raise ParameterError("m must be at least 1")
    rng = np.random.default_rng(rng_seed)
    states, actions = sample_joint_trajectories(game, mu, m, rng)
    states_ref, actions_ref = sample_joint_trajectories(game, mu_ref, m, rng)
    unlabelled = PreferenceDataset(
        game.num_actions, states, actions, states_ref, actions_ref, np.ones((m, game.num_agents), int), epsilon_budget
    )
    prob = preference_probabilities(game, unlabelled)
    labels = np.where(rng.random(prob.shape) < prob, 1, -1)
    truth = CorruptionTruth(np.zeros(m, bool), states, actions, states_ref, actions_ref, labels)
    provenance = {"seed": _seed_repr(rng_seed), "mu": policy_ids[0], "mu_ref": policy_ids[1], "game": game.content_hash()}
    return replace(unlabelled, labels=labels, provenance=provenance, truth=truth)


def _seed_repr(seed):
    return seed if isinstance(seed, (int, str)) or seed is None else repr(seed)


# --------------------------------------------------------------------- corruption


def corruption_budget(epsilon: float, m: int) -> int:
    return int(np.floor(epsilon * m + 1e-12))


def _advantage(game, dataset, agents) -> np.ndarray:
    theta = game.reward_params.reshape(game.num_agents, -1)[list(agents)]
    return dataset.feature_differences(game.features) @ theta.T  # (m, |agents|)


def corrupt_dataset(
    dataset: PreferenceDataset,
    epsilon: float,
    attacker: str,
    rng_seed,
    game: LinearMarkovGame,
    target_agents=None,
    behavior: Policy | None = None,
) -> PreferenceDataset:
    """Replace at most ``floor(epsilon * m)`` samples using a full-information attacker.

    The attacked samples are the first ``floor(epsilon * m)`` entries of a seeded
    permutation, so for one seed the corrupted sets are nested in ``epsilon``.

    * ``label_flip_random`` negates every agent's label.
    * ``label_flip_targeted`` sets the targeted agents' labels (default: all) against
      the true preference, ``o = -sign(theta*^T dphi)``.
    * ``trajectory_substitution`` rewrites the ``mu``-side trajectory so every move
      lands in the state that the true kernel makes least likely, and labels it preferred.
    * ``feature_outlier`` replaces the ``mu``-side trajectory with the rarest state-action
      pair at every step (under ``behavior``, default uniform) and labels against truth.
    """
    if not 0 <= epsilon < 0.5:
        raise ParameterError("epsilon must lie in [0, 1/2)")
    if attacker not in ATTACKERS:
        raise ParameterError(f"unknown attacker {attacker!r}; choose from {ATTACKERS}")
    m = len(dataset)
    k = corruption_budget(epsilon, m)
    base_truth = dataset.truth
    if base_truth is None:
        base_truth = CorruptionTruth(
            np.zeros(m, bool), dataset.states, dataset.actions, dataset.states_ref, dataset.actions_ref, dataset.labels
        )
    if k == 0 and epsilon == 0:
        return replace(dataset, epsilon_budget=max(dataset.epsilon_budget, epsilon), truth=replace(base_truth, attacker=attacker))
    rng = np.random.default_rng(rng_seed)
    chosen = np.sort(rng.permutation(m)[:k])

    states = dataset.states.copy()
    actions = dataset.actions.copy()
    labels = dataset.labels.copy()
    agents = list(range(dataset.num_agents)) if target_agents is None else sorted(int(a) for a in target_agents)
    if any(not 0 <= a < dataset.num_agents for a in agents):
        raise ParameterError("target agent out of range")

    if attacker == "label_flip_random":
        labels[chosen] = -labels[chosen]
    elif attacker == "label_flip_targeted":
        adv = _advantage(game, dataset.subset(chosen), agents)
        labels[np.ix_(chosen, agents)] = np.where(adv > 0, -1, 1)
    elif attacker == "trajectory_substitution":
        for h in range(dataset.horizon - 1):
            P = game.transitions[h, states[chosen, h], actions[chosen, h]]  # (k, S)
            states[chosen, h + 1] = P.argmin(axis=1)
        labels[chosen] = 1
    else:  # feature_outlier
        if behavior is None:
            from .game import ProductMarkovPolicy

            behavior = ProductMarkovPolicy.uniform(game.num_actions, game.horizon, game.num_states)
        occ = occupancy(game, behavior)
        rare = occ.reshape(game.horizon, -1).argmin(axis=1)
        rare_s, rare_j = np.unravel_index(rare, occ.shape[1:])
        states[chosen] = rare_s
        actions[chosen] = rare_j
        modified = replace(dataset, states=states, actions=actions).subset(chosen)
        adv = _advantage(game, modified, agents)
        labels[np.ix_(chosen, agents)] = np.where(adv > 0, -1, 1)

    corrupted = base_truth.corrupted.copy()
    changed = (
        (states != dataset.states).any(axis=1)
        | (actions != dataset.actions).any(axis=1)
        | (labels != dataset.labels).any(axis=1)
    )
    corrupted[chosen] |= changed[chosen]
    truth = replace(base_truth, corrupted=corrupted, attacker=attacker, epsilon=float(epsilon))
    return replace(
        dataset,
        states=states,
        actions=actions,
        labels=labels,
        epsilon_budget=max(dataset.epsilon_budget, float(epsilon)),
        truth=truth,
    )


def per_step_modifications(dataset: PreferenceDataset) -> np.ndarray:
    """Number of samples whose step-``h`` record differs from its clean original, per ``h``."""
    t = dataset.truth
    if t is None:
        raise ParameterError("dataset carries no clean originals")
    step = (
        (dataset.states != t.clean_states)
        | (dataset.actions != t.clean_actions)
        | (dataset.states_ref != t.clean_states_ref)
        | (dataset.actions_ref != t.clean_actions_ref)
        | (dataset.labels != t.clean_labels).any(axis=1, keepdims=True)
    )
    return step.sum(axis=0)


def split_dataset(dataset: PreferenceDataset, rng_seed) -> tuple[PreferenceDataset, PreferenceDataset]:
    m = len(dataset)
    if m < 2:
        raise ParameterError("need at least two samples to split")
    order = np.random.default_rng(rng_seed).permutation(m)
    half = m // 2
    return dataset.subset(np.sort(order[:half])), dataset.subset(np.sort(order[half:]))


# ---------------------------------------------------------------------- file I/O


def save_dataset(dataset: PreferenceDataset, path, game: LinearMarkovGame) -> None:
    """Write the learner-visible records; corruption bookkeeping goes to ``<path>.truth``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, H = dataset.num_agents, dataset.horizon
    header = {
        "m": len(dataset),
        "n": n,
        "H": H,
        "d": game.feature_dim,
        "game_hash": game.content_hash(),
        "epsilon": repr(float(dataset.epsilon_budget)),
    }
    header.update({f"prov_{k}": str(v) for k, v in sorted(dataset.provenance.items()) if k != "game"})
    table = game.joint_action_table
    lines = [",".join(f"{k}={v}" for k, v in header.items())]
    for k in range(len(dataset)):
        fields = []
        for states, actions in ((dataset.states, dataset.actions), (dataset.states_ref, dataset.actions_ref)):
            for h in range(H):
                fields.append(str(states[k, h]))
                fields.extend(str(a) for a in table[actions[k, h]])
        fields.extend(str(o) for o in dataset.labels[k])
        lines.append(",".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    truth_path = Path(str(path) + ".truth")
    if dataset.truth is not None:
        t = dataset.truth
        doc = {
            "attacker": t.attacker,
            "epsilon": t.epsilon,
            "corrupted": t.corrupted.astype(int).tolist(),
            "clean_states": t.clean_states.tolist(),
            "clean_actions": t.clean_actions.tolist(),
            "clean_states_ref": t.clean_states_ref.tolist(),
            "clean_actions_ref": t.clean_actions_ref.tolist(),
            "clean_labels": t.clean_labels.tolist(),
        }
        truth_path.write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    elif truth_path.exists():
        truth_path.unlink()


def read_dataset_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    return dict(item.split("=", 1) for item in first.split(","))


def load_dataset(path, game: LinearMarkovGame, with_truth: bool = False) -> PreferenceDataset:
    """Read a dataset file; the sidecar is only opened when ``with_truth`` is set."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = dict(item.split("=", 1) for item in lines[0].split(","))
    m, n, H, d = (int(header[k]) for k in ("m", "n", "H", "d"))
    if (n, H, d) != (game.num_agents, game.horizon, game.feature_dim):
        raise ConstructionError(f"{path}: header (n, H, d) = {(n, H, d)} does not match the game")
    if header["game_hash"] != game.content_hash():
        raise ConstructionError(f"{path}: dataset was generated for a different game")
    rows = np.array([[int(x) for x in line.split(",")] for line in lines[1:] if line], dtype=np.int64)
    if rows.shape != (m, 2 * H * (1 + n) + n):
        raise ConstructionError(f"{path}: expected {m} records of {2 * H * (1 + n) + n} fields")
    sides = rows[:, : 2 * H * (1 + n)].reshape(m, 2, H, 1 + n)
    states = sides[:, :, :, 0]
    actions = game.joint_index(sides[:, :, :, 1:])
    provenance = {k[5:]: v for k, v in header.items() if k.startswith("prov_")}
    provenance["game"] = header["game_hash"]
    truth = None
    if with_truth:
        truth_path = Path(str(path) + ".truth")
        doc = json.loads(truth_path.read_text(encoding="utf-8"))
        truth = CorruptionTruth(
            np.asarray(doc["corrupted"], bool),
            *(np.asarray(doc[k], np.int64) for k in ("clean_states", "clean_actions", "clean_states_ref", "clean_actions_ref", "clean_labels")),
            attacker=doc["attacker"],
            epsilon=doc["epsilon"],
        )
    return PreferenceDataset(
        game.num_actions,
        states[:, 0],
        actions[:, 0],
        states[:, 1],
        actions[:, 1],
        rows[:, 2 * H * (1 + n):],
        float(header["epsilon"]),
        provenance,
        truth,
    )
