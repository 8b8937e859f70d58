"""Independent reference implementations used as test oracles.

These use the pointwise model API and plain loops (or a separate vectorized
formulation) so they share no code path with the batched solvers.
"""

import itertools
import math

import numpy as np


def naive_flow(model, a, policy):
    T, S, A = model.T, model.S, model.A
    d = np.zeros((T + 1, S, A))
    mu = [float(x) for x in model.follower_initial]
    for t in range(T + 1):
        for s in range(S):
            for x in range(A):
                d[t, s, x] = mu[s] * policy[t][s][x]
        if t < T:
            new = [0.0] * S
            for s in range(S):
                for x in range(A):
                    p = model.follower_transition(t, a, s, x, d[t])
                    for z in range(S):
                        new[z] += d[t, s, x] * p[z]
            mu = new
    return d


def naive_follower_return(model, a, flow):
    total = 0.0
    for t in range(model.T + 1):
        for s in range(model.S):
            for x in range(model.A):
                total += flow[t, s, x] * model.follower_reward(t, a, s, x, flow[t])
    return total


def naive_leader_return(model, a, flow):
    Sl = model.dims.n_leader_states
    nu = [float(x) for x in model.leader_initial]
    total = 0.0
    for t in range(model.T + 1):
        for s in range(Sl):
            total += nu[s] * model.leader_reward(t, s, a, flow[t])
        if t < model.T:
            new = [0.0] * Sl
            for s in range(Sl):
                p = model.leader_transition(t, s, a, flow[t])
                for z in range(Sl):
                    new[z] += nu[s] * p[z]
            nu = new
    return total


def frozen_tables_pointwise(model, a, flow):
    T, S, A = model.T, model.S, model.A
    P = np.array([[[model.follower_transition(t, a, s, x, flow[t]) for x in range(A)]
                   for s in range(S)] for t in range(T)]).reshape(T, S, A, S)
    r = np.array([[[model.follower_reward(t, a, s, x, flow[t]) for x in range(A)]
                   for s in range(S)] for t in range(T + 1)])
    return P, r


def brute_force_value(model, a, flow):
    """Max over all deterministic policies of the return in the frozen MDP."""
    T, S, A = model.T, model.S, model.A
    P, r = frozen_tables_pointwise(model, a, flow)
    rows = (T + 1) * S
    n = A ** rows
    digits = np.array(np.unravel_index(np.arange(n), (A,) * rows)).T.reshape(n, T + 1, S)
    mu = np.tile(model.follower_initial, (n, 1))
    total = np.zeros(n)
    states = np.arange(S)
    for t in range(T + 1):
        acts = digits[:, t]                                     # (n, S)
        total += (mu * r[t][states, acts]).sum(axis=1)
        if t < T:
            kernel = P[t][states, acts]                         # (n, S, S)
            mu = np.einsum("ns,nsz->nz", mu, kernel)
    return float(total.max())


def naive_exploitability(model, a, flow):
    return brute_force_value(model, a, flow) - naive_follower_return(model, a, flow)


def naive_deterministic_ne(model, a, eps):
    """Digit tuples of deterministic policies whose flow is an eps-NE."""
    T, S, A = model.T, model.S, model.A
    found = set()
    for digits in itertools.product(range(A), repeat=(T + 1) * S):
        policy = np.zeros((T + 1, S, A))
        for i, x in enumerate(digits):
            policy[i // S, i % S, x] = 1.0
        flow = naive_flow(model, a, policy)
        if naive_exploitability(model, a, flow) <= eps + 1e-10:
            found.add(digits)
    return found


def monte_carlo_return(model, a, policy, n, rng):
    """Sampled follower return of ``policy`` against its own flow."""
    T, S, A = model.T, model.S, model.A
    flow = naive_flow(model, a, policy)
    P, r = frozen_tables_pointwise(model, a, flow)

    def draw(prob_rows):
        u = rng.random(len(prob_rows))[:, None]
        return np.minimum((np.cumsum(prob_rows, axis=1) < u).sum(axis=1), prob_rows.shape[1] - 1)

    s = draw(np.tile(model.follower_initial, (n, 1)))
    ret = np.zeros(n)
    for t in range(T + 1):
        x = draw(np.asarray(policy[t])[s])
        ret += r[t][s, x]
        if t < T:
            s = draw(P[t][s, x])
    return float(ret.mean()), float(ret.std(ddof=1) / math.sqrt(n))


def predator_value(eps0, eps, delta_r=0.0):
    """Worst-case predator return: 1 minus the largest admissible exposed mass."""
    x = 1 + eps0 + delta_r
    # mu (mu - x) + eps >= 0 holds for mu <= lower root or mu >= upper root
    disc = x * x - 4 * eps
    if disc < 0:
        return 0.0
    upper = (x + math.sqrt(disc)) / 2
    if upper <= 1 + 1e-15:
        return 0.0
    return 1 - (x - math.sqrt(disc)) / 2


def single_state_grid_oracle(model, a, eps, m):
    """Leader worst case for a one-state, two-action, T=1 model on an
    (m+1) x (m+1) grid of (pi_0(a0), pi_1(a0)), from closed-form returns."""
    assert model.S == 1 and model.A == 2 and model.T == 1 and model.dims.n_leader_states == 1
    p = np.linspace(0.0, 1.0, m + 1)
    d0 = np.stack([p, 1 - p], axis=1)                          # flows at t=0 and t=1
    fr = [np.array([[model.follower_reward(t, a, 0, x, d[None, :]) for x in range(2)]
                    for d in d0]) for t in range(2)]              # (m+1, 2)
    lr = [np.array([model.leader_reward(t, 0, a, d[None, :]) for d in d0]) for t in range(2)]
    V = fr[0].max(axis=1)[:, None] + fr[1].max(axis=1)[None, :]
    J = (d0 * fr[0]).sum(1)[:, None] + (d0 * fr[1]).sum(1)[None, :]
    R = lr[0][:, None] + lr[1][None, :]
    feasible = V - J <= eps + 1e-10
    return float(R[feasible].min()) if feasible.any() else None
