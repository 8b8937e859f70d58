import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_policy, small_model
from oracles import monte_carlo_return, naive_flow, naive_follower_return, naive_leader_return
from smfg.dynamics import (PropagationError, consistency_residual, extract_policy,
                           follower_return, leader_return, propagate_follower_flow,
                           propagate_leader_marginals)
from smfg.model import majority_model, predator_model, random_affine_model


def constant_policy(model, action):
    p = np.zeros((model.T + 1, model.S, model.A))
    p[..., action] = 1.0
    return p


def test_predator_all_to_s():
    m = predator_model(0.2)
    flow = propagate_follower_flow(m, 0, constant_policy(m, 1))
    assert flow[1].sum(axis=1).tolist() == [0.0, 1.0]
    assert follower_return(m, 0, flow) == 1.0
    assert leader_return(m, 0, flow) == 1.0


def test_predator_all_to_e():
    m = predator_model(0.2)
    flow = propagate_follower_flow(m, 0, constant_policy(m, 0))
    assert follower_return(m, 0, flow) == pytest.approx(0.8, abs=1e-15)
    assert leader_return(m, 0, flow) == 0.0


def test_point_masses_stay_point_masses():
    m = majority_model(3, (1.0, 1.0, 1.0), horizon=3, follower_initial=[0, 1, 0])
    rng = np.random.default_rng(0)
    for _ in range(10):
        acts = rng.integers(0, 3, size=(m.T + 1, 3))
        policy = np.eye(3)[acts]
        flow = propagate_follower_flow(m, 0, policy)
        for t in range(m.T + 1):
            assert np.count_nonzero(flow[t]) == 1 and flow[t].max() == 1.0


def test_majority_gather_flow_and_leader_reward():
    m = majority_model(2, horizon=3, leader_action_grid=[[0.3, 0.7]])
    flow = propagate_follower_flow(m, 0, constant_policy(m, 0))
    target = np.array([[1.0, 0.0], [0.0, 0.0]])
    for t in range(1, m.T + 1):
        assert np.array_equal(flow[t], target)
    assert leader_return(m, 0, flow) == pytest.approx(m.T * 0.4, abs=1e-15)


def test_leader_marginals_single_state_and_power_iteration():
    m = predator_model()
    flow = propagate_follower_flow(m, 0, constant_policy(m, 0))
    assert propagate_leader_marginals(m, 0, flow).tolist() == [[1.0], [1.0]]
    # L-independent leader chain: compare with matrix products
    rng = np.random.default_rng(4)
    m = random_affine_model(rng, 2, 2, 4, 3, 1, coupling=0.0)
    flow = propagate_follower_flow(m, 0, random_policy(m, rng))
    mu = propagate_leader_marginals(m, 0, flow)
    ref = m.leader_initial.copy()
    for t in range(m.T):
        ref = ref @ m.pl_base[0, t]
        np.testing.assert_allclose(mu[t + 1], ref, atol=1e-15)


def test_zero_reward_model_returns_zero():
    rng = np.random.default_rng(1)
    m = random_affine_model(rng, 2, 2, 2, 1, 1)
    m = m.with_tables(r_base=np.zeros_like(m.r_base), r_lin=np.zeros_like(m.r_lin))
    flow = propagate_follower_flow(m, 0, random_policy(m, rng))
    assert follower_return(m, 0, flow) == 0.0


def test_consistency_residual():
    m = predator_model()
    policy = np.full((2, 2, 2), 0.5)
    flow = propagate_follower_flow(m, 0, policy)
    assert consistency_residual(m, 0, policy, flow) == 0.0
    shifted = flow.copy()
    shifted[1, 0, 0] += 0.1
    assert consistency_residual(m, 0, policy, shifted) == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("seed", range(30))
def test_propagation_matches_naive_loops(seed):
    m = small_model(seed)
    rng = np.random.default_rng(seed)
    policy = random_policy(m, rng)
    flow = propagate_follower_flow(m, 0, policy)
    ref = naive_flow(m, 0, policy)
    np.testing.assert_allclose(flow, ref, atol=1e-12)
    assert consistency_residual(m, 0, policy, ref) <= 1e-12
    assert follower_return(m, 0, flow) == pytest.approx(naive_follower_return(m, 0, ref),
                                                        abs=1e-12)
    assert leader_return(m, 0, flow) == pytest.approx(naive_leader_return(m, 0, ref), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_normalization_and_determinism(seed):
    m = small_model(seed)
    policy = random_policy(m, np.random.default_rng(seed))
    flow = propagate_follower_flow(m, 0, policy)
    assert flow.min() >= 0.0
    np.testing.assert_allclose(flow.sum(axis=(1, 2)), 1.0, atol=1e-10)
    mu = propagate_leader_marginals(m, 0, flow)
    assert mu.min() >= 0.0
    np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-10)
    assert propagate_follower_flow(m, 0, policy).tobytes() == flow.tobytes()


@pytest.mark.parametrize("seed", range(20))
def test_policy_extraction_round_trip(seed):
    m = small_model(seed)
    policy = random_policy(m, np.random.default_rng(seed))
    flow = propagate_follower_flow(m, 0, policy)
    again = propagate_follower_flow(m, 0, extract_policy(flow))
    np.testing.assert_allclose(again, flow, atol=1e-12)


def test_extraction_gives_uniform_rows_without_mass():
    m = predator_model(follower_initial=[0.0, 1.0])
    policy = constant_policy(m, 1)
    pi = extract_policy(propagate_follower_flow(m, 0, policy))
    assert pi[0, 0].tolist() == [0.5, 0.5] and pi[0, 1].tolist() == [0.0, 1.0]


def test_invalid_inputs():
    m = predator_model()
    with pytest.raises(ValueError, match="shape"):
        propagate_follower_flow(m, 0, np.ones((3, 2, 2)) / 2)
    with pytest.raises(ValueError, match="probability"):
        propagate_follower_flow(m, 0, np.ones((2, 2, 2)))
    with pytest.raises(ValueError, match="distribution"):
        follower_return(m, 0, np.ones((2, 2, 2)))
    assert issubclass(PropagationError, RuntimeError)


def test_expectation_form_matches_monte_carlo():
    """100 random models; each sampled return within 3 standard errors."""
    misses = []
    for seed in range(100):
        m = small_model(seed, max_horizon=2)
        rng = np.random.default_rng(1000 + seed)
        policy = random_policy(m, rng)
        exact = follower_return(m, 0, propagate_follower_flow(m, 0, policy))
        mean, se = monte_carlo_return(m, 0, policy, 100_000, rng)
        if abs(mean - exact) > 3 * se + 1e-12:
            misses.append((seed, exact, mean, se))
    assert not misses, misses


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), S=st.integers(1, 4), A=st.integers(1, 4),
       T=st.integers(1, 4), coupling=st.floats(0.0, 1.0))
def test_flow_slices_are_distributions(seed, S, A, T, coupling):
    rng = np.random.default_rng(seed)
    m = random_affine_model(rng, S, A, T, 2, 1, coupling=coupling)
    flow = propagate_follower_flow(m, 0, random_policy(m, rng))
    assert flow.min() >= 0.0
    assert np.abs(flow.sum(axis=(1, 2)) - 1).max() <= 1e-10
