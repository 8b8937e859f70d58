"""Follower best response against a frozen flow, and its LP certificate.

With the leader action and the flow fixed, the representative follower
faces a finite-horizon MDP. Its value is computed by backward induction and
certified through the occupation-measure LP

    minimize  c^T x   subject to  A x = b,  x >= 0

with ``c = -r`` stacked over time. A dual ``(u, v)`` built from the DP
values satisfies ``A^T u + v = c``, ``v >= 0`` and ``v^T x = 0``, which
proves the DP value optimal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (follower_return, follower_rewards_batch, validate_flow)
from .model import StackelbergModel, vec

TIE_TOL = 1e-12
DENSE_CAP = 10_000_000


class CertificateError(RuntimeError):
    """A DP-built certificate failed its own residual checks."""


@dataclass
class ValueTable:
    V: np.ndarray        # (T+1, S) value-to-go
    Q: np.ndarray        # (T+1, S, A)
    greedy: np.ndarray   # (T+1, S, A) bool, argmax sets within TIE_TOL
    value: float         # mu_0 . V_0

    def greedy_policy(self) -> np.ndarray:
        """Deterministic greedy policy, lowest action index on ties."""
        first = np.argmax(self.greedy, axis=-1)
        return np.eye(self.Q.shape[-1])[first]


def frozen_tables(model: StackelbergModel, a: int, flows: np.ndarray):
    """Transitions and rewards evaluated along ``flows`` (N, T+1, S, A)."""
    P = [model.follower_transition_batch(a, t, vec(flows[:, t])) for t in range(model.T)]
    r = follower_rewards_batch(model, a, flows)
    return P, r


def backward_induction_batch(model: StackelbergModel, P: list, r: list):
    """Values for a batch of frozen MDPs; returns (V, Q) with batch axis first."""
    T = model.T
    N = r[0].shape[0]
    V = np.empty((N, T + 1, model.S))
    Q = np.empty((N, T + 1, model.S, model.A))
    Q[:, T] = r[T]
    V[:, T] = Q[:, T].max(axis=-1)
    for t in range(T - 1, -1, -1):
        Q[:, t] = r[t] + np.einsum("nsaz,nz->nsa", P[t], V[:, t + 1])
        V[:, t] = Q[:, t].max(axis=-1)
    return V, Q


def follower_value_batch(model: StackelbergModel, V: np.ndarray) -> np.ndarray:
    return np.einsum("s,ns->n", model.follower_initial, V[:, 0])


def backward_induction_value(model: StackelbergModel, leader_action: int, flow) -> ValueTable:
    flow = validate_flow(model, flow)
    P, r = frozen_tables(model, leader_action, flow[None])
    V, Q = backward_induction_batch(model, P, r)
    V, Q = V[0], Q[0]
    greedy = Q >= V[:, :, None] - TIE_TOL
    return ValueTable(V=V, Q=Q, greedy=greedy,
                      value=float(model.follower_initial @ V[0]))


def follower_value(model: StackelbergModel, leader_action: int, flow) -> float:
    return backward_induction_value(model, leader_action, flow).value


def exploitability(model: StackelbergModel, leader_action: int, flow) -> float:
    """Best-response value minus the flow's own return."""
    return follower_value(model, leader_action, flow) - follower_return(model, leader_action, flow)


# -- LP data ------------------------------------------------------------------

@dataclass
class LPData:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    horizon: int
    n_states: int
    n_actions: int

    def col(self, t: int, s: int, a: int) -> int:
        S, A = self.n_states, self.n_actions
        return t * S * A + s + S * a

    def col_to_tsa(self, j: int) -> tuple[int, int, int]:
        S, A = self.n_states, self.n_actions
        t, k = divmod(j, S * A)
        a, s = divmod(k, S)
        return t, s, a

    def row(self, block: int, s: int) -> int:
        """Row of state ``s`` in ``block``; blocks 0..T-1 carry the flow
        constraints and block T the initial condition."""
        return block * self.n_states + s

    def to_json(self) -> dict:
        return {"dims": {"horizon": self.horizon, "n_states": self.n_states,
                         "n_actions": self.n_actions, "rows": int(self.A.shape[0]),
                         "cols": int(self.A.shape[1])},
                "A": self.A.tolist(), "b": self.b.tolist(), "c": self.c.tolist()}


def assemble_lp(model: StackelbergModel, leader_action: int, flow,
                dense_cap: int = DENSE_CAP) -> LPData:
    flow = validate_flow(model, flow)
    T, S, A = model.T, model.S, model.A
    SA = S * A
    rows, cols = S * (T + 1), SA * (T + 1)
    if rows * cols > dense_cap:
        raise ValueError(f"dense LP would have {rows}x{cols} entries, above cap {dense_cap}")
    P, r = frozen_tables(model, leader_action, flow[None])
    Z = np.tile(np.eye(S), (1, A))
    Amat = np.zeros((rows, cols))
    for t in range(T):
        # W_t[l, s + S a] = P_t(l | s, a, d_t)
        W = vec(np.moveaxis(P[t][0], -1, 0))
        Amat[t * S:(t + 1) * S, t * SA:(t + 1) * SA] = W
        Amat[t * S:(t + 1) * S, (t + 1) * SA:(t + 2) * SA] = -Z
    Amat[T * S:, :SA] = Z
    b = np.zeros(rows)
    b[T * S:] = model.follower_initial
    c = -np.concatenate([vec(r[t][0]) for t in range(T + 1)])
    return LPData(A=Amat, b=b, c=c, horizon=T, n_states=S, n_actions=A)


# -- certificates ---------------------------------------------------------------

@dataclass
class KKTCertificate:
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    V: float

    def to_json(self) -> dict:
        return {"x": self.x.tolist(), "u": self.u.tolist(), "v": self.v.tolist(), "V": self.V}


@dataclass
class KKTReport:
    primal_residual: float        # ||A x - b||_inf
    dual_residual: float          # ||A^T u + v - c||_inf
    min_x: float
    min_v: float
    complementarity: float        # |v^T x|
    value_gap: float              # |V + c^T x|
    tol: float

    @property
    def flags(self) -> dict:
        tol = self.tol
        return {"primal_residual": self.primal_residual <= tol,
                "dual_residual": self.dual_residual <= tol,
                "min_x": self.min_x >= -tol,
                "min_v": self.min_v >= -tol,
                "complementarity": self.complementarity <= tol,
                "value_gap": self.value_gap <= tol}

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def to_json(self) -> dict:
        return {"primal_residual": self.primal_residual, "dual_residual": self.dual_residual,
                "min_x": self.min_x, "min_v": self.min_v,
                "complementarity": self.complementarity, "value_gap": self.value_gap,
                "tol": self.tol, "flags": self.flags, "passed": self.passed}


def occupation_measure(model: StackelbergModel, leader_action: int, flow, policy) -> np.ndarray:
    """Occupation of ``policy`` in the MDP frozen at ``flow`` (not re-consistent)."""
    P, _ = frozen_tables(model, leader_action, np.asarray(flow, float)[None])
    x = np.empty((model.T + 1, model.S, model.A))
    mu = model.follower_initial.copy()
    for t in range(model.T + 1):
        x[t] = mu[:, None] * policy[t]
        if t < model.T:
            mu = np.einsum("sa,saz->z", x[t], P[t][0])
    return x


def kkt_certificate_from_dp(values: ValueTable, model: StackelbergModel,
                            leader_action: int, flow, tol: float = 1e-9) -> KKTCertificate:
    T, S = model.T, model.S
    x = occupation_measure(model, leader_action, flow, values.greedy_policy())
    x = np.concatenate([vec(x[t]) for t in range(T + 1)])
    u = np.empty(S * (T + 1))
    for t in range(T):
        u[t * S:(t + 1) * S] = values.V[t + 1]
    u[T * S:] = -values.V[0]
    lp = assemble_lp(model, leader_action, flow)
    v = lp.c - lp.A.T @ u
    cert = KKTCertificate(x=x, u=u, v=v, V=float(values.value))
    report = verify_kkt(lp, cert, tol)
    if not report.passed:
        raise CertificateError(f"DP certificate failed its checks: {report.to_json()}")
    return cert


def verify_kkt(lp: LPData, cert: KKTCertificate, tol: float = 1e-9) -> KKTReport:
    m, n = lp.A.shape
    if cert.x.shape != (n,) or cert.v.shape != (n,) or cert.u.shape != (m,):
        raise ValueError(f"certificate dims x{cert.x.shape} u{cert.u.shape} v{cert.v.shape} "
                         f"do not match A {lp.A.shape}")
    return KKTReport(
        primal_residual=float(np.abs(lp.A @ cert.x - lp.b).max()),
        dual_residual=float(np.abs(lp.A.T @ cert.u + cert.v - lp.c).max()),
        min_x=float(cert.x.min()),
        min_v=float(cert.v.min()),
        complementarity=float(abs(cert.v @ cert.x)),
        value_gap=float(abs(cert.V + lp.c @ cert.x)),
        tol=tol)
