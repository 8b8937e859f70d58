"""epsilon-Nash equilibria of the followers' game for a fixed leader action.

The best-response set is infinite, so it is represented by finite candidate
pools: every deterministic policy, or every policy on a simplex mesh. Each
candidate policy is propagated to its (unique) consistent flow, so a
candidate is a member exactly when its exploitability is at most epsilon.

A :class:`CandidatePool` scans its source once and keeps exploitability and
leader return per candidate; the worst-case (or best-case) leader value for
any epsilon is then a prefix minimum over candidates sorted by
exploitability.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dynamics import (consistency_residual, follower_return_batch, leader_return_batch,
                       propagate_batch, validate_flow, validate_policy)
from .mdp import backward_induction_batch, follower_value_batch
from .model import StackelbergModel, vec

MEMBER_SLACK = 1e-10
VALUE_TIE = 1e-12
CHUNK = 1 << 14
DEFAULT_ENUM_CAP = 1_000_000
DEFAULT_MESH_CAP = 4_000_000


class CapExceeded(ValueError):
    """A candidate source is larger than the configured cap."""


def policy_cap(default: int) -> int:
    env = os.environ.get("SMFG_CAP_POLICIES")
    return int(env) if env else default


@dataclass
class EquilibriumCandidate:
    policy: np.ndarray
    flow: np.ndarray
    exploitability: float
    consistent: bool

    def is_member(self, epsilon: float) -> bool:
        return self.consistent and self.exploitability <= epsilon + MEMBER_SLACK

    def to_json(self) -> dict:
        return {"policy": self.policy.tolist(), "flow": self.flow.tolist(),
                "exploitability": self.exploitability, "consistent": self.consistent}


def evaluate_policies(model: StackelbergModel, a: int, policies: np.ndarray):
    """Consistent flows and exploitabilities for a batch of policies."""
    flows, P = propagate_batch(model, a, policies)
    r = [model.follower_reward_batch(a, t, vec(flows[:, t])) for t in range(model.T + 1)]
    J = follower_return_batch(model, a, flows, r)
    V, _ = backward_induction_batch(model, P, r)
    return flows, follower_value_batch(model, V) - J


def check_epsilon_ne(model: StackelbergModel, leader_action: int, policy, flow,
                     epsilon: float) -> EquilibriumCandidate:
    """Evaluate both equilibrium conditions for a (policy, flow) pair."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    from .mdp import exploitability
    policy = validate_policy(model, policy)
    flow = validate_flow(model, flow)
    residual = consistency_residual(model, leader_action, policy, flow)
    return EquilibriumCandidate(policy=policy, flow=flow,
                                exploitability=exploitability(model, leader_action, flow),
                                consistent=residual <= MEMBER_SLACK)


# -- policy sources -------------------------------------------------------------

@lru_cache(maxsize=64)
def simplex_grid(n_actions: int, m: int) -> np.ndarray:
    """All points of the action simplex with coordinates in {0, 1/m, ..., 1}."""
    pts = [c for c in itertools.product(range(m + 1), repeat=n_actions - 1) if sum(c) <= m]
    pts = [c + (m - sum(c),) for c in pts]
    grid = np.array(sorted(pts), dtype=float) / m
    grid.flags.writeable = False
    return grid


def _grid_neighbours(grid: np.ndarray, m: int):
    """Index pairs of grid points one unit transfer apart."""
    counts = np.rint(grid * m).astype(int)
    index = {tuple(c): i for i, c in enumerate(counts)}
    I, J = [], []
    for i, c in enumerate(counts):
        for x, y in itertools.permutations(range(len(c)), 2):
            if c[x] > 0:
                d = c.copy()
                d[x] -= 1
                d[y] += 1
                j = index[tuple(d)]
                if i < j:
                    I.append(i)
                    J.append(j)
    return np.array(I, dtype=int), np.array(J, dtype=int)


def final_actions_irrelevant(model: StackelbergModel, a: int) -> bool:
    """True when the time-T action split cannot change any return.

    That holds when time-T follower rewards ignore the action and every
    time-T reward sees ``L_T`` only through its state marginal.
    """
    if model.leader_reward_fn is not None:
        return False
    T, S, A = model.T, model.S, model.A

    def marginal_only(w):            # w[..., k], k = s + S a
        w = w.reshape(w.shape[:-1] + (A, S))
        return np.all(w == w[..., :1, :])

    rb, rl = model.r_base[a, T], model.r_lin[a, T]
    if not (np.all(rb == rb[:, :1]) and np.all(rl == rl[:, :1]) and marginal_only(rl)):
        return False
    if model.r_quad is not None:
        q = model.r_quad[a, T]
        if not np.all(q == q[:, :1]):
            return False
        q = q.reshape(q.shape[:-2] + (A, S, A, S))
        if not (np.all(q == q[..., :1, :, :, :]) and np.all(q == q[..., :1, :])):
            return False
    if not marginal_only(model.rl_lin[a, T]):
        return False
    if model.rl_quad is not None:
        q = model.rl_quad[a, T].reshape((-1, A, S, A, S))
        if not (np.all(q == q[:, :1]) and np.all(q == q[:, :, :, :1])):
            return False
    return True


def free_rows(model: StackelbergModel, a: int) -> np.ndarray:
    """Mask of policy rows (t, s) that can change some return."""
    relevant = np.ones((model.T + 1, model.S), dtype=bool)
    relevant[0] = model.follower_initial > 0
    if final_actions_irrelevant(model, a):
        relevant[model.T] = False
    return relevant


class DeterministicPolicies:
    """Every deterministic policy, in lexicographic order over (t, s)."""

    guarantee = "enumerated-deterministic"

    def __init__(self, model: StackelbergModel, cap: int | None = None):
        self.model = model
        self.rows = (model.T + 1) * model.S
        self.size = model.A ** self.rows
        cap = policy_cap(DEFAULT_ENUM_CAP) if cap is None else cap
        if self.size > cap:
            raise CapExceeded(f"{model.A}^{self.rows} = {self.size} deterministic policies "
                              f"exceed the cap {cap}; use mesh or local search")

    def policies_at(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        m = self.model
        digits = np.array(np.unravel_index(idx, (m.A,) * self.rows)).T   # (n, rows)
        return np.eye(m.A)[digits].reshape(len(idx), m.T + 1, m.S, m.A)

    def describe(self) -> dict:
        return {"name": "enumerate", "size": self.size}


class MeshPolicies:
    """Policies whose rows lie on a simplex mesh of spacing ``h``.

    Rows that cannot influence any return (states without initial mass at
    t=0, and the final step when :func:`final_actions_irrelevant`) are
    pinned to action 0; the pinned policy is on every mesh, so meshes for
    ``h`` and ``h/2`` stay nested.
    """

    guarantee = "exact-over-mesh"

    def __init__(self, model: StackelbergModel, a: int, h: float, cap: int | None = None,
                 relevant: np.ndarray | None = None):
        if not 0 < h <= 1:
            raise ValueError(f"mesh spacing must be in (0, 1], got {h}")
        m = round(1.0 / h)
        if abs(m * h - 1.0) > 1e-9:
            raise ValueError(f"mesh spacing {h} must divide 1")
        self.model, self.h, self.m = model, 1.0 / m, m
        self.grid = simplex_grid(model.A, m)
        if relevant is None:
            relevant = free_rows(model, a)
        self.relevant = np.asarray(relevant, dtype=bool)
        self.n_rows = int(relevant.sum())
        self.size = len(self.grid) ** self.n_rows
        cap = policy_cap(DEFAULT_MESH_CAP) if cap is None else cap
        if self.size > cap:
            raise CapExceeded(f"mesh with spacing {self.h:g} has {len(self.grid)}^{self.n_rows} "
                              f"= {self.size} policies, above the cap {cap}")

    def policies_at(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        m = self.model
        out = np.zeros((len(idx), m.T + 1, m.S, m.A))
        out[..., 0] = 1.0
        if self.n_rows:
            pts = np.array(np.unravel_index(idx, (len(self.grid),) * self.n_rows)).T
            out[:, self.relevant] = self.grid[pts]
        return out

    def neighbour_spread(self, values: np.ndarray) -> float:
        """Largest change of ``values`` between adjacent mesh policies."""
        if self.n_rows == 0:
            return 0.0
        I, J = _grid_neighbours(self.grid, self.m)
        if len(I) == 0:
            return 0.0
        grid_vals = values.reshape((len(self.grid),) * self.n_rows)
        spread = 0.0
        for axis in range(self.n_rows):
            diff = np.take(grid_vals, I, axis=axis) - np.take(grid_vals, J, axis=axis)
            spread = max(spread, float(np.abs(diff).max()))
        return spread

    def describe(self) -> dict:
        return {"name": "mesh", "h": self.h, "size": self.size, "free_rows": self.n_rows}


class ExplicitPolicies:
    """A fixed list of policies (used for seeds and round-trip checks)."""

    guarantee = "local"

    def __init__(self, policies: np.ndarray):
        self._policies = np.asarray(policies, dtype=float)
        self.size = len(self._policies)

    def policies_at(self, idx) -> np.ndarray:
        return self._policies[np.asarray(idx, dtype=np.int64)]

    def describe(self) -> dict:
        return {"name": "explicit", "size": self.size}


# -- candidate pool -------------------------------------------------------------

class CandidatePool:
    def __init__(self, model: StackelbergModel, a: int, source, threads: int = 1,
                 chunk: int = CHUNK):
        self.model, self.a, self.source = model, a, source
        self.chunk = chunk
        self.size = source.size
        self.exploitability = np.empty(self.size)
        self.leader_value = np.empty(self.size)
        starts = list(range(0, self.size, chunk))

        def work(start):
            stop = min(start + chunk, self.size)
            policies = source.policies_at(np.arange(start, stop))
            flows, expl = evaluate_policies(model, a, policies)
            self.exploitability[start:stop] = expl
            self.leader_value[start:stop] = leader_return_batch(model, a, flows)

        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(work, starts))
        else:
            for s in starts:
                work(s)
        self.order = np.argsort(self.exploitability, kind="stable")
        self.sorted_expl = self.exploitability[self.order]
        self._prefix = {}

    @property
    def evals(self) -> int:
        return self.size

    def n_members(self, epsilon: float) -> int:
        return int(np.searchsorted(self.sorted_expl, epsilon + MEMBER_SLACK, side="right"))

    def member_indices(self, epsilon: float) -> np.ndarray:
        return np.sort(self.order[:self.n_members(epsilon)])

    def _prefix_best(self, mode: str) -> np.ndarray:
        if mode not in self._prefix:
            vals = self.leader_value[self.order]
            acc = np.minimum.accumulate if mode == "pessimistic" else np.maximum.accumulate
            self._prefix[mode] = acc(vals)
        return self._prefix[mode]

    def value(self, epsilon: float, mode: str = "pessimistic") -> float | None:
        n = self.n_members(epsilon)
        return None if n == 0 else float(self._prefix_best(mode)[n - 1])

    def best_index(self, epsilon: float, mode: str = "pessimistic") -> int | None:
        """Witness index; ties in value go to the lexicographically smallest flow."""
        best = self.value(epsilon, mode)
        if best is None:
            return None
        members = self.order[:self.n_members(epsilon)]
        vals = self.leader_value[members]
        close = np.abs(vals - best) <= VALUE_TIE
        ties = np.sort(members[close])
        if len(ties) == 1:
            return int(ties[0])
        best_key, best_idx = None, None
        for start in range(0, len(ties), self.chunk):
            part = ties[start:start + self.chunk]
            flows, _ = propagate_batch(self.model, self.a, self.source.policies_at(part))
            flat = flows.reshape(len(part), -1)
            j = np.lexsort(flat.T[::-1])[0]
            key = tuple(flat[j])
            if best_key is None or key < best_key:
                best_key, best_idx = key, int(part[j])
        return best_idx

    def candidate(self, index: int) -> EquilibriumCandidate:
        policy = self.source.policies_at([index])[0]
        flows, expl = evaluate_policies(self.model, self.a, policy[None])
        return EquilibriumCandidate(policy=policy, flow=flows[0],
                                    exploitability=float(expl[0]), consistent=True)

    def resolution(self) -> float:
        """Two mesh steps of leader-return change (0 for exact enumeration)."""
        if isinstance(self.source, MeshPolicies):
            return 2.0 * self.source.neighbour_spread(self.leader_value)
        return 0.0


def _members(pool: CandidatePool, epsilon: float) -> list:
    return [pool.candidate(int(i)) for i in pool.member_indices(epsilon)]


def enumerate_deterministic_candidates(model: StackelbergModel, leader_action: int,
                                       epsilon: float, cap: int | None = None,
                                       threads: int = 1) -> list:
    """All deterministic policies whose consistent flow is an epsilon-NE."""
    pool = CandidatePool(model, leader_action, DeterministicPolicies(model, cap), threads)
    return _members(pool, epsilon)


def mesh_candidates(model: StackelbergModel, leader_action: int, epsilon: float, h: float,
                    cap: int | None = None, threads: int = 1) -> list:
    """Mesh policies whose consistent flow is an epsilon-NE."""
    pool = CandidatePool(model, leader_action, MeshPolicies(model, leader_action, h, cap),
                         threads)
    return _members(pool, epsilon)


def reward_span_bound(model: StackelbergModel) -> float:
    """Upper bound on any exploitability: (T+1) times the follower reward range."""
    return 2.0 * (model.T + 1) * model.reward_bound() if math.isfinite(model.reward_bound()) \
        else math.inf
