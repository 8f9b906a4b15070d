"""Multiplicative-weights dynamics for per-agent min-max stage games."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ParameterError

LossSpec = Union[Sequence[np.ndarray], Callable[[list], list]]
HEDGE_VARIANTS = ("optimistic", "vanilla")


def default_hedge_rate(num_agents: int, rounds: int) -> float:
    return 1.0 / (num_agents * max(1.0, math.log(max(rounds, 1))))


@dataclass
class HedgeResult:
    min_policies: list  # round-averaged min-player distributions, one per agent
    max_policies: list  # round-averaged max-player distributions
    joint: np.ndarray  # round average of the product of the min-players' iterates
    min_regrets: np.ndarray  # (n,) averaged external regret of each min-player
    max_regrets: np.ndarray
    rounds: int

    def to_dict(self) -> dict:
        return {
            "min_policies": [p.tolist() for p in self.min_policies],
            "max_policies": [p.tolist() for p in self.max_policies],
            "min_regrets": self.min_regrets.tolist(),
            "max_regrets": self.max_regrets.tolist(),
            "rounds": self.rounds,
        }


def _normalize(logw: np.ndarray) -> np.ndarray:
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _joint_product(dists: list) -> np.ndarray:
    out = np.ones(1)
    for p in dists:
        out = np.outer(out, p).ravel()
    return out


def optimistic_hedge(
    losses: LossSpec,
    eta: float,
    rounds: int,
    variant: str = "optimistic",
    init_min: Sequence[np.ndarray] | None = None,
    init_max: Sequence[np.ndarray] | None = None,
) -> HedgeResult:
    """Run ``rounds`` of simultaneous hedge updates for ``n`` min-max pairs.

    Agent ``i`` owns a matrix ``L_i[a_dagger, a_prime]``.  Its max-player gains
    ``L_i @ p_i`` and its min-player loses ``q_i @ L_i``, where ``p_i``/``q_i`` are the
    current min/max iterates.  ``losses`` may be a callable mapping the current
    min-player iterates of all agents to the list of matrices, which couples agents
    through shared stage values.  The optimistic variant steps with ``2 g_t - g_{t-1}``.
    """
    if variant not in HEDGE_VARIANTS:
        raise ParameterError(f"hedge variant must be one of {HEDGE_VARIANTS}")
    if eta <= 0:
        raise ParameterError("learning rate must be positive")
    loss_fn = losses if callable(losses) else (lambda _p, fixed=list(losses): fixed)

    def start(init, sizes):
        if init is None:
            return [np.full(a, 1.0 / a) for a in sizes]
        return [np.asarray(p, float) / np.sum(p) for p in init]

    if init_min is not None:
        sizes = [len(p) for p in init_min]
    elif callable(losses):
        raise ParameterError("callable losses need explicit initial min-player distributions")
    else:
        sizes = [np.shape(L)[1] for L in losses]
    p = start(init_min, sizes)
    q = start(init_max, [np.shape(L)[0] for L in loss_fn(p)])
    n = len(p)
    if rounds <= 0:
        return HedgeResult(p, q, _joint_product(p), np.zeros(n), np.zeros(n), 0)

    log_p = [np.log(np.maximum(x, 1e-300)) for x in p]
    log_q = [np.log(np.maximum(x, 1e-300)) for x in q]
    prev_loss = [None] * n
    prev_gain = [None] * n
    sum_p = [np.zeros_like(x) for x in p]
    sum_q = [np.zeros_like(x) for x in q]
    sum_joint = np.zeros(int(np.prod(sizes)))
    cum_loss = [np.zeros_like(x) for x in p]
    cum_gain = [np.zeros_like(x) for x in q]
    realized_loss = np.zeros(n)
    realized_gain = np.zeros(n)

    for _ in range(rounds):
        mats = [np.asarray(L, float) for L in loss_fn(p)]
        sum_joint += _joint_product(p)
        for i in range(n):
            gain = mats[i] @ p[i]
            loss = q[i] @ mats[i]
            sum_p[i] += p[i]
            sum_q[i] += q[i]
            cum_loss[i] += loss
            cum_gain[i] += gain
            realized_loss[i] += p[i] @ loss
            realized_gain[i] += q[i] @ gain
            if variant == "optimistic":
                step_loss = 2 * loss - (loss if prev_loss[i] is None else prev_loss[i])
                step_gain = 2 * gain - (gain if prev_gain[i] is None else prev_gain[i])
            else:
                step_loss, step_gain = loss, gain
            prev_loss[i], prev_gain[i] = loss, gain
            log_p[i] = log_p[i] - eta * step_loss
            log_q[i] = log_q[i] + eta * step_gain
            log_p[i] -= log_p[i].max()
            log_q[i] -= log_q[i].max()
        p = [_normalize(x) for x in log_p]
        q = [_normalize(x) for x in log_q]

    min_regret = np.array([(realized_loss[i] - cum_loss[i].min()) / rounds for i in range(n)])
    max_regret = np.array([(cum_gain[i].max() - realized_gain[i]) / rounds for i in range(n)])
    return HedgeResult(
        [s / rounds for s in sum_p],
        [s / rounds for s in sum_q],
        sum_joint / rounds,
        min_regret,
        max_regret,
        rounds,
    )


def duality_gap(loss: np.ndarray, min_policy: np.ndarray, max_policy: np.ndarray) -> float:
    """``max_a E_{a'~p} L(a, a') - min_a' E_{a~q} L(a, a')`` for one min-max pair."""
    loss = np.asarray(loss, float)
    return float((loss @ min_policy).max() - (max_policy @ loss).min())
