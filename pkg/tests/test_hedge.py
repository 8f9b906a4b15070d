import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from robust_marlhf.errors import ParameterError
from robust_marlhf.hedge import HEDGE_VARIANTS, default_hedge_rate, duality_gap, optimistic_hedge

PENNIES = np.array([[1.0, -1.0], [-1.0, 1.0]])


def test_single_action_agents():
    res = optimistic_hedge([np.array([[0.3]]), np.array([[-2.0]])], 0.1, 50)
    for p in res.min_policies + res.max_policies:
        assert np.array_equal(p, [1.0])
    assert np.allclose(res.min_regrets, 0) and np.allclose(res.max_regrets, 0)


def test_loss_constant_in_min_action_keeps_uniform():
    L = np.array([[1.0, 1.0], [0.0, 0.0]])
    res = optimistic_hedge([L], 0.5, 300)
    assert np.allclose(res.min_policies[0], [0.5, 0.5], atol=1e-12)


@pytest.mark.parametrize("variant", HEDGE_VARIANTS)
def test_matching_pennies(variant):
    gaps = {}
    for T in (100, 1000):
        # uniform is already the equilibrium, so start away from it
        res = optimistic_hedge(
            [PENNIES], default_hedge_rate(1, T), T, variant, init_min=[[0.9, 0.1]], init_max=[[0.2, 0.8]]
        )
        gaps[T] = duality_gap(PENNIES, res.min_policies[0], res.max_policies[0])
        if T == 1000:
            assert np.abs(res.min_policies[0] - 0.5).max() <= 0.05
            assert np.abs(res.max_policies[0] - 0.5).max() <= 0.05
    assert gaps[1000] < gaps[100]
    # exact minimax value 0: brute force over pure strategies of the max player
    assert duality_gap(PENNIES, np.full(2, 0.5), np.full(2, 0.5)) == 0.0


def test_zero_rounds_returns_uniform():
    res = optimistic_hedge([np.zeros((3, 3))], 0.1, 0)
    assert np.allclose(res.min_policies[0], 1 / 3) and res.rounds == 0


def test_coupled_losses_need_initial_policies():
    with pytest.raises(ParameterError):
        optimistic_hedge(lambda mins: [PENNIES], 0.1, 10)
    with pytest.raises(ParameterError):
        optimistic_hedge([PENNIES], 0.0, 10)
    with pytest.raises(ParameterError):
        optimistic_hedge([PENNIES], 0.1, 10, variant="sgd")


def test_joint_is_average_product():
    L1 = np.array([[0.0, 1.0], [1.0, 0.0]])
    L2 = np.array([[0.2, 0.0, 1.0], [0.0, 0.5, 0.3], [0.1, 0.1, 0.1]])
    res = optimistic_hedge([L1, L2], 0.2, 40)
    assert res.joint.shape == (6,)
    assert res.joint.sum() == pytest.approx(1.0)
    # marginals of the averaged joint equal the averaged min-policies
    assert np.allclose(res.joint.reshape(2, 3).sum(axis=1), res.min_policies[0])
    assert np.allclose(res.joint.reshape(2, 3).sum(axis=0), res.min_policies[1])


@given(
    loss=arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-5, 5)),
    eta=st.floats(0.01, 2.0),
    rounds=st.integers(1, 60),
    variant=st.sampled_from(HEDGE_VARIANTS),
)
@settings(max_examples=60, deadline=None)
def test_outputs_are_distributions(loss, eta, rounds, variant):
    res = optimistic_hedge([loss], eta, rounds, variant, init_min=[np.ones(loss.shape[1])])
    for p in (res.min_policies[0], res.max_policies[0], res.joint):
        assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    # against a fixed opponent average, the duality gap of the averages is nonnegative
    assert duality_gap(loss, res.min_policies[0], res.max_policies[0]) >= -1e-9
