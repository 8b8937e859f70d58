"""Forward propagation of mean-field flows and evaluation of returns.

Flows are arrays ``d[t, s, a]`` of shape ``(T+1, S, A)``; policies share that
shape with rows ``pi[t, s, :]`` on the action simplex. Batched variants take
a leading candidate axis.
"""

from __future__ import annotations

import numpy as np

from .model import SIMPLEX_TOL, StackelbergModel, vec

NORMALIZE_TOL = 1e-10


class PropagationError(RuntimeError):
    """A propagated marginal drifted off the simplex beyond rounding."""


def _normalize(mu: np.ndarray, what: str) -> np.ndarray:
    if mu.min(initial=0.0) < -NORMALIZE_TOL:
        raise PropagationError(f"{what}: negative mass {mu.min():.3g}")
    mu = np.clip(mu, 0.0, None)
    sums = mu.sum(axis=-1, keepdims=True)
    if np.abs(sums - 1.0).max(initial=0.0) >= NORMALIZE_TOL:
        raise PropagationError(f"{what}: mass {sums.ravel()[np.argmax(np.abs(sums - 1.0))]:.15g} "
                               f"is not 1")
    return mu / sums


def validate_policy(model: StackelbergModel, policy) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    shape = (model.T + 1, model.S, model.A)
    if policy.shape != shape:
        raise ValueError(f"policy has shape {policy.shape}, expected {shape}")
    if policy.min() < -SIMPLEX_TOL or np.abs(policy.sum(axis=-1) - 1.0).max() > SIMPLEX_TOL:
        raise ValueError("policy rows must be probability vectors over follower actions")
    return policy


def validate_flow(model: StackelbergModel, flow) -> np.ndarray:
    flow = np.asarray(flow, dtype=float)
    shape = (model.T + 1, model.S, model.A)
    if flow.shape != shape:
        raise ValueError(f"flow has shape {flow.shape}, expected {shape}")
    if flow.min() < -SIMPLEX_TOL or np.abs(flow.sum(axis=(-1, -2)) - 1.0).max() > SIMPLEX_TOL:
        raise ValueError("each flow slice d_t must be a distribution over S x A")
    return flow


def propagate_batch(model: StackelbergModel, a: int, policies: np.ndarray):
    """Propagate ``policies`` (N, T+1, S, A) through the follower dynamics.

    Returns ``(flows, transitions)`` where ``transitions[t]`` is the
    (N, S, A, S) kernel evaluated at the flow's own ``d_t``.
    """
    N = policies.shape[0]
    T = model.T
    flows = np.empty_like(policies, dtype=float)
    mu = np.broadcast_to(model.follower_initial, (N, model.S))
    flows[:, 0] = mu[:, :, None] * policies[:, 0]
    transitions = []
    for t in range(T):
        P = model.follower_transition_batch(a, t, vec(flows[:, t]))
        transitions.append(P)
        mu = _normalize(np.einsum("nsa,nsaz->nz", flows[:, t], P), f"follower marginal t={t + 1}")
        flows[:, t + 1] = mu[:, :, None] * policies[:, t + 1]
    return flows, transitions


def leader_marginals_batch(model: StackelbergModel, a: int, flows: np.ndarray) -> np.ndarray:
    N = flows.shape[0]
    out = np.empty((N, model.T + 1, model.dims.n_leader_states))
    nu = np.broadcast_to(model.leader_initial, out[:, 0].shape)
    out[:, 0] = nu
    for t in range(model.T):
        P = model.leader_transition_batch(a, t, vec(flows[:, t]))
        nu = _normalize(np.einsum("ns,nsz->nz", nu, P), f"leader marginal t={t + 1}")
        out[:, t + 1] = nu
    return out


def follower_rewards_batch(model: StackelbergModel, a: int, flows: np.ndarray) -> list:
    return [model.follower_reward_batch(a, t, vec(flows[:, t])) for t in range(model.T + 1)]


def follower_return_batch(model: StackelbergModel, a: int, flows: np.ndarray,
                          rewards: list | None = None) -> np.ndarray:
    if rewards is None:
        rewards = follower_rewards_batch(model, a, flows)
    total = np.zeros(flows.shape[0])
    for t in range(model.T + 1):
        total += np.einsum("nsa,nsa->n", flows[:, t], rewards[t])
    return total


def leader_return_batch(model: StackelbergModel, a: int, flows: np.ndarray) -> np.ndarray:
    nus = leader_marginals_batch(model, a, flows)
    total = np.zeros(flows.shape[0])
    for t in range(model.T + 1):
        total += np.einsum("ns,ns->n", nus[:, t], model.leader_reward_batch(a, t, vec(flows[:, t])))
    return total


# -- single-instance API ----------------------------------------------------

def propagate_follower_flow(model: StackelbergModel, leader_action: int, policy) -> np.ndarray:
    """The unique flow consistent with ``policy`` under ``leader_action``."""
    policy = validate_policy(model, policy)
    flows, _ = propagate_batch(model, leader_action, policy[None])
    return flows[0]


def propagate_leader_marginals(model: StackelbergModel, leader_action: int, flow) -> np.ndarray:
    flow = validate_flow(model, flow)
    return leader_marginals_batch(model, leader_action, flow[None])[0]


def follower_return(model: StackelbergModel, leader_action: int, flow) -> float:
    flow = validate_flow(model, flow)
    return float(follower_return_batch(model, leader_action, flow[None])[0])


def leader_return(model: StackelbergModel, leader_action: int, flow) -> float:
    flow = validate_flow(model, flow)
    return float(leader_return_batch(model, leader_action, flow[None])[0])


def consistency_residual(model: StackelbergModel, leader_action: int, policy, flow) -> float:
    """Sup-norm gap between ``flow`` and the flow ``policy`` induces."""
    flow = np.asarray(flow, dtype=float)
    return float(np.abs(flow - propagate_follower_flow(model, leader_action, policy)).max())


def extract_policy(flow) -> np.ndarray:
    """Policy read off a flow; states without mass get the uniform row."""
    flow = np.asarray(flow, dtype=float)
    mass = flow.sum(axis=-1, keepdims=True)
    uniform = np.full_like(flow, 1.0 / flow.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(mass > 0, flow / np.where(mass > 0, mass, 1.0), uniform)
