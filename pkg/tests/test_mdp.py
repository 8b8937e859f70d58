import numpy as np
import pytest

from conftest import random_policy, small_model
from oracles import brute_force_value, naive_exploitability
from smfg.dynamics import propagate_follower_flow
from smfg.mdp import (KKTCertificate, assemble_lp, backward_induction_value,
                      exploitability, follower_value, kkt_certificate_from_dp, verify_kkt)
from smfg.model import majority_model, predator_model, random_affine_model


def flow_of(model, action):
    p = np.zeros((model.T + 1, model.S, model.A))
    p[..., action] = 1.0
    return propagate_follower_flow(model, 0, p)


def test_predator_value_is_one_everywhere():
    m = predator_model(0.2)
    rng = np.random.default_rng(0)
    for _ in range(20):
        flow = propagate_follower_flow(m, 0, random_policy(m, rng))
        assert follower_value(m, 0, flow) == 1.0


def test_predator_exploitability():
    m = predator_model(0.2)
    assert exploitability(m, 0, flow_of(m, 1)) == 0.0
    assert exploitability(m, 0, flow_of(m, 0)) == pytest.approx(0.2, abs=1e-15)


def test_majority_gather_profiles_are_nash():
    m = majority_model(2, horizon=2)
    for k in range(2):
        assert abs(exploitability(m, 0, flow_of(m, k))) <= 1e-10


def test_zero_rewards_give_zero_values_and_duals():
    rng = np.random.default_rng(2)
    m = random_affine_model(rng, 2, 2, 2, 1, 1)
    m = m.with_tables(r_base=np.zeros_like(m.r_base), r_lin=np.zeros_like(m.r_lin))
    flow = propagate_follower_flow(m, 0, random_policy(m, rng))
    vt = backward_induction_value(m, 0, flow)
    assert np.all(vt.V == 0)
    cert = kkt_certificate_from_dp(vt, m, 0, flow)
    assert np.all(cert.u == 0) and np.all(cert.v == 0) and cert.V == 0


def test_lp_layout_two_by_two():
    m = predator_model(0.2)
    flow = flow_of(m, 1)
    lp = assemble_lp(m, 0, flow)
    assert lp.A.shape == (4, 8)
    Z = np.hstack([np.eye(2), np.eye(2)])
    np.testing.assert_array_equal(lp.A[:2, 4:], -Z)
    np.testing.assert_array_equal(lp.A[2:, :4], Z)
    np.testing.assert_array_equal(lp.A[2:, 4:], 0)
    # W_0[l, s + 2a] = P(l | s, a): action a moves to location a
    np.testing.assert_array_equal(lp.A[:2, :4], [[1, 1, 0, 0], [0, 0, 1, 1]])
    np.testing.assert_array_equal(lp.b, [0, 0, 0.5, 0.5])
    # c = -r: (t=1, s=e, a=s) with mu(e) = 0 earns -0.2
    assert lp.c[lp.col(1, 0, 1)] == pytest.approx(0.2, abs=1e-15)
    assert lp.c[lp.col(1, 1, 0)] == -1.0


def test_certificate_for_predator():
    m = predator_model(0.2)
    flow = flow_of(m, 1)
    vt = backward_induction_value(m, 0, flow)
    cert = kkt_certificate_from_dp(vt, m, 0, flow)
    report = verify_kkt(assemble_lp(m, 0, flow), cert, 1e-9)
    assert report.passed and cert.V == 1.0
    greedy = np.concatenate([np.swapaxes(vt.greedy[t], 0, 1).ravel() for t in range(2)])
    assert np.all(np.abs(cert.v[greedy]) <= 1e-12)


def test_verify_kkt_detects_perturbations():
    m = predator_model(0.2)
    flow = flow_of(m, 1)
    lp = assemble_lp(m, 0, flow)
    cert = kkt_certificate_from_dp(backward_induction_value(m, 0, flow), m, 0, flow)
    x = cert.x.copy()
    x[0] += 0.1
    bad = verify_kkt(lp, KKTCertificate(x, cert.u, cert.v, cert.V))
    assert bad.primal_residual >= 0.05 and not bad.flags["primal_residual"]
    v = cert.v.copy()
    v[-1] = -0.01
    bad = verify_kkt(lp, KKTCertificate(cert.x, cert.u, v, cert.V))
    assert bad.min_v == pytest.approx(-0.01) and not bad.flags["min_v"]
    with pytest.raises(ValueError, match="dims"):
        verify_kkt(lp, KKTCertificate(cert.x[:-1], cert.u, cert.v, cert.V))


def test_dense_cap():
    m = predator_model()
    with pytest.raises(ValueError, match="cap"):
        assemble_lp(m, 0, flow_of(m, 0), dense_cap=10)


@pytest.mark.parametrize("seed", range(25))
def test_column_map_and_sparsity(seed):
    m = small_model(seed)
    flow = propagate_follower_flow(m, 0, random_policy(m, np.random.default_rng(seed)))
    lp = assemble_lp(m, 0, flow)
    n = lp.A.shape[1]
    seen = set()
    S = m.S
    for j in range(n):
        t, s, a = lp.col_to_tsa(j)
        assert lp.col(t, s, a) == j
        seen.add((t, s, a))
        blocks = {i // S for i in np.nonzero(lp.A[:, j])[0]}
        allowed = {t, t - 1} | ({m.T} if t == 0 else set())
        assert blocks <= allowed
    assert len(seen) == n


@pytest.mark.parametrize("seed", range(25))
def test_dp_matches_brute_force_and_certificate(seed):
    m = small_model(seed)
    flow = propagate_follower_flow(m, 0, random_policy(m, np.random.default_rng(seed)))
    vt = backward_induction_value(m, 0, flow)
    assert vt.value == pytest.approx(brute_force_value(m, 0, flow), abs=1e-12)
    cert = kkt_certificate_from_dp(vt, m, 0, flow)
    rep = verify_kkt(assemble_lp(m, 0, flow), cert, 1e-9)
    assert rep.passed
    assert abs(cert.V - vt.value) <= 1e-10
    support = cert.x > 0
    assert np.all(cert.v[support] <= 1e-10)


@pytest.mark.parametrize("seed", range(30))
def test_exploitability_nonnegative_and_matches_oracle(seed):
    m = small_model(seed)
    rng = np.random.default_rng(seed)
    flow = propagate_follower_flow(m, 0, random_policy(m, rng))
    e = exploitability(m, 0, flow)
    assert e >= -1e-10
    assert e == pytest.approx(naive_exploitability(m, 0, flow), abs=1e-12)


def test_greedy_sets_keep_ties():
    m = predator_model(0.2)
    vt = backward_induction_value(m, 0, flow_of(m, 1))
    # at t=1 rewards ignore the action, so both actions are greedy
    assert vt.greedy[1].all()
    assert vt.greedy_policy()[1].tolist() == [[1.0, 0.0], [1.0, 0.0]]
