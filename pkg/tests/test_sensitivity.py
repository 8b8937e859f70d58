import numpy as np
import pytest

from conftest import random_policy, small_model
from oracles import predator_value
from smfg.equilibrium import reward_span_bound
from smfg.model import ModelError, majority_model, predator_model
from smfg.sensitivity import (InadmissibleError, PerturbationSpec, admissibility,
                              check_flow_deviation, check_theorem_sandwich,
                              check_value_deviation, corollary_sweep, epsilon_sweep,
                              gaps_nonincreasing, perturb_model, relaxed_action_experiment,
                              theorem_margin)
from smfg.solver import Strategy

TABLES = ("p_base", "p_lin", "pl_base", "pl_lin", "r_base", "r_lin", "rl_base", "rl_lin",
          "follower_initial", "leader_initial")


def test_zero_perturbation_is_bitwise_identity():
    m = small_model(5, quadratic=True)
    out = perturb_model(m, PerturbationSpec(0.0, 0.0, seed=9))
    for key in TABLES + ("r_quad",):
        a, b = getattr(m, key), getattr(out, key)
        assert (a is None and b is None) or a.tobytes() == b.tobytes()


def test_predator_reward_shift_form():
    m = predator_model(0.2)
    out = perturb_model(m, PerturbationSpec(0.0, 0.1, "builtin-example2"))
    L = np.array([[0.3, 0.1], [0.4, 0.2]])         # mu(e) = 0.4
    assert out.follower_reward(1, 0, 0, 0, L) == pytest.approx(0.4 - 0.2 - 0.1, abs=1e-15)
    assert out.follower_reward(1, 0, 1, 1, L) == 1.0
    np.testing.assert_array_equal(out.p_base, m.p_base)
    assert out.params["perturbation"]["mode"] == "builtin-example2"


def test_builtin_modes_check_the_model():
    with pytest.raises(ModelError):
        perturb_model(small_model(0), PerturbationSpec(0.0, 0.1, "builtin-example2"))
    with pytest.raises(ModelError):
        perturb_model(predator_model(), PerturbationSpec(0.0, 0.1, "builtin-example3"))
    with pytest.raises(ModelError, match="closure"):
        perturb_model(majority_model(2), PerturbationSpec(0.1, 0.1))
    with pytest.raises(ValueError):
        PerturbationSpec(-0.1, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_random_perturbation_respects_sizes(seed):
    m = small_model(seed)
    dp, dr = 0.05, 0.1
    out = perturb_model(m, PerturbationSpec(dp, dr, seed=seed))
    rng = np.random.default_rng(seed + 77)
    worst_p = float(np.abs(m.follower_initial - out.follower_initial).max())
    worst_r = 0.0
    for v in rng.dirichlet(np.ones(m.K), size=1000):
        L = v.reshape(m.A, m.S).T                    # vec is column-major
        for t in range(m.T + 1):
            for s in range(m.S):
                for x in range(m.A):
                    worst_r = max(worst_r, abs(m.follower_reward(t, 0, s, x, L)
                                               - out.follower_reward(t, 0, s, x, L)))
                    if t < m.T:
                        p = out.follower_transition(t, 0, s, x, L)
                        assert p.min() >= 0 and abs(p.sum() - 1) <= 1e-12
                        worst_p = max(worst_p, float(np.abs(
                            m.follower_transition(t, 0, s, x, L) - p).max()))
    assert worst_p <= dp + 1e-12 and worst_r <= dr + 1e-12
    assert out.kind.startswith("affine")


def test_margin_formula():
    assert theorem_margin(2.0, 2, 1, 0.0, 0.1) == pytest.approx(0.2)
    assert theorem_margin(1.0, 1, 1, 0.01, 0.0) == pytest.approx(2 * 3 ** 2 * 0.01)
    assert theorem_margin(1.0, 1, 1, 0.01, 0.0, exponent=3) == pytest.approx(2 * 27 * 0.01)


def test_zero_perturbation_bounds_are_zero():
    m = small_model(2)
    out = perturb_model(m, PerturbationSpec())
    policy = random_policy(m, np.random.default_rng(0))
    flow = check_flow_deviation(m, out, 0, policy)
    assert all(r["observed"] == 0 for r in flow.flow) and flow.passed
    value = check_value_deviation(m, out, 0, policy)
    assert value.value["observed"] == 0 and value.passed


def test_reward_shift_leaves_flows_and_values_unchanged():
    m = predator_model(0.2)
    out = perturb_model(m, PerturbationSpec(0.3, 0.1, "builtin-example2"))
    rng = np.random.default_rng(1)
    for _ in range(10):
        policy = random_policy(m, rng)
        flow = check_flow_deviation(m, out, 0, policy)
        assert all(r["observed"] == 0 for r in flow.flow)
    value = check_value_deviation(m, out, 0, random_policy(m, rng))
    assert value.value["observed"] == 0 and value.passed


@pytest.mark.parametrize("seed", range(25))
def test_lemma_bounds_on_random_models(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed, leader_states=int(rng.integers(1, 4)))
    spec = PerturbationSpec(float(rng.uniform(0, 0.05)), float(rng.uniform(0, 0.2)), seed=seed)
    out = perturb_model(m, spec)
    policy = random_policy(m, rng)
    rep = check_flow_deviation(m, out, 0, policy).merge(check_value_deviation(m, out, 0, policy))
    assert rep.passed, rep.violations
    assert rep.max_ratio("flow") <= 1 and rep.max_ratio("value") <= 1


def test_flow_violation_is_reported_with_location():
    m = small_model(3)
    out = perturb_model(m, PerturbationSpec(0.2, 0.0, seed=1))
    policy = random_policy(m, np.random.default_rng(2))
    rep = check_flow_deviation(m, out, 0, policy, delta_p=1e-6)
    assert not rep.passed
    v = rep.violations[0]
    assert {"t", "s", "a", "observed", "bound"} <= set(v)


def test_sandwich_on_predator_example():
    m = predator_model(0.2)
    out = perturb_model(m, PerturbationSpec(0.0, 0.05, "builtin-example2"))
    rep = check_theorem_sandwich(m, out, 0, 0.2, 0.2, Strategy("mesh", h=1 / 128))
    assert rep.passed, rep.violations
    assert rep.sandwich["lower"]["slack"] >= 0
    assert rep.sandwich["upper"]["slack"] >= 0
    # the closed forms agree with what the checker saw
    assert rep.sandwich["lower"]["J"] == pytest.approx(0.0, abs=1e-9)
    assert rep.sandwich["upper"]["J_hat"] == pytest.approx(predator_value(0.2, 0.0, 0.05),
                                                           abs=5e-3)


def test_sandwich_without_perturbation_is_monotonicity():
    m = small_model(7, max_states=2, max_actions=2, max_horizon=1)
    rep = check_theorem_sandwich(m, perturb_model(m, PerturbationSpec()), 0, 0.1, 0.05,
                                 Strategy("mesh", h=1 / 8))
    assert rep.passed
    assert rep.sandwich["lower"]["J_hat"] <= rep.sandwich["lower"]["J"]


def test_sandwich_refuses_inadmissible_triples():
    m = predator_model(0.2)
    out = perturb_model(m, PerturbationSpec(0.0, 0.2, "builtin-example2"))
    with pytest.raises(InadmissibleError, match="exceeds"):
        check_theorem_sandwich(m, out, 0, 0.2, 0.1)
    with pytest.raises(InadmissibleError):
        check_theorem_sandwich(m, perturb_model(m, PerturbationSpec()), 0, 0.2, 0.0)
    assert not admissibility(m, 0.0, 0.2, 0.1)["admissible"]


@pytest.mark.parametrize("seed", range(6))
def test_sandwich_on_random_models(seed):
    m = small_model(seed, max_states=2, max_actions=2, max_horizon=1)
    spec = PerturbationSpec(1e-3, 1e-2, seed=seed)
    out = perturb_model(m, spec)
    B = admissibility(m, spec.delta_p, spec.delta_r, 1.0)["margin"]
    eps_p = 2.1 * B
    rep = check_theorem_sandwich(m, out, 0, eps_p + 0.05, eps_p, Strategy("mesh", h=1 / 16))
    assert rep.passed, rep.violations


def test_relaxed_two_action_experiment():
    m = predator_model(0.2, two_action=True)
    out = perturb_model(m, PerturbationSpec(0.0, 0.1, "builtin-example3"))
    rep = relaxed_action_experiment(m, out, 0.2, 0.4, Strategy("mesh", h=1 / 256))
    names = m.leader_actions
    assert names[rep.true_action] == "l"
    assert rep.true_value == pytest.approx(0.8 / 3, abs=1e-6)
    assert names[rep.unrelaxed_action] == "g"
    assert rep.unrelaxed_true_value == pytest.approx(0.0, abs=1e-9)
    assert rep.unrelaxed_gap == pytest.approx(0.8 / 3, abs=1e-6)
    assert names[rep.relaxed_action] == "l" and rep.relaxed_gap == 0.0


def test_corollary_gaps_shrink():
    m = predator_model(0.2, two_action=True)
    rows = corollary_sweep(m, PerturbationSpec(0.0, 0.1, "builtin-example3"), 0.2, 0.4,
                           Strategy("mesh", h=1 / 64), steps=4)
    assert gaps_nonincreasing(rows)
    assert rows[-1]["gap"] <= 1e-12


def test_predator_sweep_finds_the_jump():
    m = predator_model(0.2)
    grid = np.round(np.arange(0, 0.401, 0.025), 10)
    sw = epsilon_sweep(m, grid, action=0, strategy=Strategy("mesh", h=1 / 256))
    assert sw.monotone and len(sw.jumps) == 1
    j = sw.jumps[0]
    assert j.left_epsilon < 0.2 <= j.right_epsilon and j.right_epsilon - j.left_epsilon <= 1e-8
    assert j.left_value == pytest.approx(0.8, abs=5e-3) and j.right_value == 0.0
    for e, v, _, _ in sw.rows():
        assert v >= predator_value(0.2, e) - 1e-9


def test_sweep_saturates_past_reward_span():
    m = small_model(8, max_states=2, max_actions=2, max_horizon=1)
    span = reward_span_bound(m)
    sw = epsilon_sweep(m, [span, span + 1, span + 5], strategy=Strategy("enumerate"))
    assert len(set(sw.values)) == 1 and sw.monotone


def test_outer_sweep_is_nonincreasing():
    m = predator_model(0.2, two_action=True)
    sw = epsilon_sweep(m, np.linspace(0, 0.4, 9), strategy=Strategy("mesh", h=1 / 64))
    assert sw.monotone
    assert all(b <= a + 1e-12 for a, b in zip(sw.values, sw.values[1:]))


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError, match="sorted"):
        epsilon_sweep(predator_model(), [0.2, 0.1])
