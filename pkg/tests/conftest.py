import numpy as np
import pytest

from robust_marlhf.game import ProductMarkovPolicy
from robust_marlhf.instances import REFERENCE_GAMES, load_reference_game, tabular_game


@pytest.fixture(scope="session")
def reference_games():
    return {name: load_reference_game(name) for name in REFERENCE_GAMES}


@pytest.fixture(scope="session")
def identical():
    return load_reference_game("identical_interest")


@pytest.fixture(scope="session")
def zero_sum():
    return load_reference_game("zero_sum")


@pytest.fixture(scope="session")
def general_sum():
    return load_reference_game("general_sum")


def uniform_policy(game):
    return ProductMarkovPolicy.uniform(game.num_actions, game.horizon, game.num_states)


def random_product_policy(game, rng):
    return ProductMarkovPolicy(
        tuple(rng.dirichlet(np.ones(a), size=(game.horizon, game.num_states)) for a in game.num_actions)
    )


def matrix_game(payoffs, canonical=False):
    """H = 1, single-state game from per-agent payoff tables indexed by joint action."""
    payoffs = np.asarray(payoffs, float)
    n = payoffs.shape[0]
    num_actions = payoffs.shape[1:]
    rewards = payoffs.reshape(n, 1, 1, -1)
    return tabular_game(np.zeros((0, 1, rewards.shape[-1], 1)), rewards, num_actions, canonical=canonical)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the end-of-run summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
