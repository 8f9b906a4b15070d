"""Experiment runner: game -> data -> corruption -> learner -> exact evaluation -> CSV."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .game import (
    LinearMarkovGame,
    ProductMarkovPolicy,
    StageCorrelatedPolicy,
    canonical_reward_params,
    cce_gap,
    load_game,
    nash_gap,
    policy_from_dict,
)
from .instances import REFERENCE_GAMES, load_reference_game, random_feature_game, random_tabular_game
from .learners import LEARNERS, LearnerConfig, LearnerOutput, run_learner
from .preferences import ATTACKERS, corrupt_dataset, generate_clean_dataset

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "seed",
    "epsilon",
    "m",
    "learner",
    "attacker",
    "status",
    "true_gap",
    "estimated_gap",
    "reward_param_error",
    "reward_param_error_per_agent",
    "num_corrupted",
    "wall_time_ms",
    "diagnostics",
    "error",
)


# ------------------------------------------------------------------ game and policy specs


def build_game(source) -> LinearMarkovGame:
    """A reference-game name, a path to a game JSON file, or a generator block.

    Generator blocks look like ``{"generator": "random_tabular", "num_states": 2,
    "num_actions": [2, 2], "horizon": 2, "seed": 0}``; ``random_feature`` also needs
    ``feature_dim``.
    """
    if isinstance(source, str):
        if source in REFERENCE_GAMES:
            return load_reference_game(source)
        return load_game(source)
    if isinstance(source, dict):
        kind = source.get("generator")
        args = {k: v for k, v in source.items() if k != "generator"}
        if "num_actions" in args:
            args["num_actions"] = tuple(args["num_actions"])
        if kind == "random_tabular":
            return random_tabular_game(**args)
        if kind == "random_feature":
            return random_feature_game(**args)
        raise ParameterError(f"unknown game generator {kind!r}")
    raise ParameterError("game must be a reference name, a file path or a generator block")


def build_policy(source, game: LinearMarkovGame):
    """``"uniform"``, ``{"stationary": [[...], ...]}``, ``{"file": path}`` or a serialized policy."""
    if source is None or source == "uniform":
        return ProductMarkovPolicy.uniform(game.num_actions, game.horizon, game.num_states)
    if isinstance(source, dict):
        if "stationary" in source:
            return ProductMarkovPolicy.stationary(source["stationary"], game.horizon, game.num_states)
        if "file" in source:
            data = json.loads(Path(source["file"]).read_text(encoding="utf-8"))
            return policy_from_dict(data.get("policy", data))
        return policy_from_dict(source)
    raise ParameterError(f"cannot interpret policy source {source!r}")


def derive_seed(seed: int, stream: int) -> int:
    """Independent integer seed for one randomness stream of a cell."""
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


DATA_STREAM, CORRUPTION_STREAM = 0, 1


# ------------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    game: object = "identical_interest"
    mu: object = "uniform"
    mu_ref: object = "uniform"
    m: int = 2000
    epsilons: list = field(default_factory=lambda: [0.0])
    attacker: str = "label_flip_targeted"
    target_agents: list | None = None
    learner: str = "uniform"
    learner_config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    output: str | None = None
    pi_star: object = None  # only read by coverage verification
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ParameterError("seeds must be non-empty")
        if any(not 0 <= e < 0.5 for e in self.epsilons) or not self.epsilons:
            raise ParameterError("every epsilon must lie in [0, 1/2) and the list must be non-empty")
        if self.learner not in LEARNERS:
            raise ParameterError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.attacker not in ATTACKERS:
            raise ParameterError(f"unknown attacker {self.attacker!r}; choose from {ATTACKERS}")
        if self.m < 2:
            raise ParameterError("m must be at least 2")
        LearnerConfig.from_dict(self.learner_config)  # validates keys early

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "epsilon" in data and "epsilons" not in data:
            data["epsilons"] = data.pop("epsilon")
        if not isinstance(data.get("epsilons", []), list):
            data["epsilons"] = [data["epsilons"]]
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultRow:
    seed: int
    epsilon: float
    m: int
    learner: str
    attacker: str
    status: str = "ok"
    true_gap: float = math.nan
    estimated_gap: float = math.nan
    reward_param_error: float = math.nan
    reward_param_error_per_agent: tuple = ()
    num_corrupted: int = 0
    wall_time_ms: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    error: str = ""

    def to_csv_fields(self) -> list[str]:
        return [
            str(self.seed),
            repr(float(self.epsilon)),
            str(self.m),
            self.learner,
            self.attacker,
            self.status,
            repr(float(self.true_gap)),
            repr(float(self.estimated_gap)),
            repr(float(self.reward_param_error)),
            ";".join(repr(float(x)) for x in self.reward_param_error_per_agent),
            str(self.num_corrupted),
            repr(float(self.wall_time_ms)),
            json.dumps(self.diagnostics, sort_keys=True, separators=(",", ":")),
            self.error,
        ]

    @classmethod
    def from_csv_fields(cls, record: dict) -> "ResultRow":
        per_agent = record["reward_param_error_per_agent"]
        return cls(
            seed=int(record["seed"]),
            epsilon=float(record["epsilon"]),
            m=int(record["m"]),
            learner=record["learner"],
            attacker=record["attacker"],
            status=record["status"],
            true_gap=float(record["true_gap"]),
            estimated_gap=float(record["estimated_gap"]),
            reward_param_error=float(record["reward_param_error"]),
            reward_param_error_per_agent=tuple(float(x) for x in per_agent.split(";")) if per_agent else (),
            num_corrupted=int(record["num_corrupted"]),
            wall_time_ms=float(record["wall_time_ms"]),
            diagnostics=json.loads(record["diagnostics"]),
            error=record["error"],
        )


# ------------------------------------------------------------------ evaluation


def true_gap(game: LinearMarkovGame, policy) -> float:
    if isinstance(policy, StageCorrelatedPolicy):
        return cce_gap(game, policy).total_gap
    return nash_gap(game, policy).total_gap


def reward_param_errors(game: LinearMarkovGame, theta_hat: np.ndarray) -> np.ndarray:
    """Per-agent ``||theta_hat - theta*||`` after removing the components that no
    preference or value can see (per-step constant shifts and unreachable states)."""
    n, H, d = game.num_agents, game.horizon, game.feature_dim
    truth = canonical_reward_params(game)
    est = canonical_reward_params(game, np.asarray(theta_hat).reshape(n, H, d))
    return np.linalg.norm((est - truth).reshape(n, -1), axis=1)


def summarize_diagnostics(output: LearnerOutput) -> dict:
    """Scalar diagnostics only; lists and arrays stay in the learner's JSON output."""
    keep = {}
    for key, value in output.diagnostics.items():
        if isinstance(value, np.generic):
            value = value.item()
        if isinstance(value, (int, float, str, bool)):
            keep[key] = value
    return keep


def evaluate_output(game: LinearMarkovGame, output: LearnerOutput) -> dict:
    errors = reward_param_errors(game, output.reward_model.theta_hat)
    return {
        "true_gap": true_gap(game, output.policy),
        "estimated_gap": output.estimated_gap,
        "reward_param_error": float(np.sqrt((errors**2).sum())),
        "reward_param_error_per_agent": tuple(float(e) for e in errors),
    }


# ------------------------------------------------------------------------ runner


def _run_cell(config: ExperimentConfig, seed: int, epsilon: float) -> ResultRow:
    row = ResultRow(seed=seed, epsilon=epsilon, m=config.m, learner=config.learner, attacker=config.attacker)
    try:
        game = build_game(config.game)
        mu, mu_ref = build_policy(config.mu, game), build_policy(config.mu_ref, game)
        data = generate_clean_dataset(game, mu, mu_ref, config.m, derive_seed(seed, DATA_STREAM))
        if epsilon > 0:
            data = corrupt_dataset(
                data, epsilon, config.attacker, derive_seed(seed, CORRUPTION_STREAM), game,
                target_agents=config.target_agents, behavior=mu,
            )
        row.num_corrupted = 0 if data.truth is None else int(data.truth.num_corrupted)
        learner_cfg = LearnerConfig.from_dict({**config.learner_config, "epsilon": epsilon, "seed": seed})
        started = time.perf_counter()
        output = run_learner(config.learner, data.without_truth(), game.skeleton(), learner_cfg)
        elapsed = (time.perf_counter() - started) * 1000
        for key, value in evaluate_output(game, output).items():
            setattr(row, key, value)
        row.diagnostics = summarize_diagnostics(output)
        row.wall_time_ms = round(elapsed, 3) if config.record_wall_time else 0.0
    except Exception as exc:  # a failing cell becomes an error row; the sweep goes on
        logger.exception("cell seed=%s epsilon=%s failed", seed, epsilon)
        row.status = "error"
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def _thread_cap() -> int:
    raw = os.environ.get("MARG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ParameterError(f"MARG_THREADS must be an integer, got {raw!r}") from None


def run_experiment(config: ExperimentConfig, output=None) -> list[ResultRow]:
    """Run every ``(seed, epsilon)`` cell and write the CSV if an output path is known.

    Cells are independent and seeded from ``(seed, stream)`` only, so running them in
    parallel (``MARG_THREADS``) gives the same rows in the same order.
    """
    cells = [(seed, eps) for seed in config.seeds for eps in config.epsilons]
    workers = min(_thread_cap(), len(cells))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, [config] * len(cells), *zip(*cells)))
    else:
        rows = [_run_cell(config, seed, eps) for seed, eps in cells]
    path = output if output is not None else config.output
    if path is not None:
        write_results(rows, path)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.to_csv_fields())
    return buf.getvalue()


def write_results(rows, path) -> None:
    """Replace ``path`` atomically with the CSV for ``rows``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(rows)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc


def read_results(path) -> list[ResultRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ParameterError(f"{path} does not have the result columns")
        return [ResultRow.from_csv_fields(rec) for rec in reader]
