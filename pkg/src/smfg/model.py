"""Game data model for finite Stackelberg mean-field games.

Every model is stored as dense tables, one set per leader action. Follower
and leader maps depend on the population state-action distribution ``L``
affinely, with an optional quadratic term on rewards::

    P_t(s' | s, a, L) = p_base[t, s, a, s'] + p_lin[t, s, a, s'] . vec(L)
    r_t(s, a, L)      = r_base[t, s, a] + r_lin[t, s, a] . vec(L)
                        + vec(L)^T r_quad[t, s, a] vec(L)

``vec`` flattens ``L[s, a]`` column-major, so index ``k = s + S * a``.
Leader tables (``pl_*``, ``rl_*``) follow the same layout over leader
states. A leader reward may instead be given by a Python callable, which is
how the majority game's indicator reward is expressed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import jsonschema
import numpy as np

SIMPLEX_TOL = 1e-12

KINDS = (
    "affine",
    "affine+quadratic",
    "builtin:majority",
    "builtin:predator",
    "builtin:predator-perturbed",
    "builtin:predator-two-action",
)


class ModelError(ValueError):
    """Raised when a model config or table fails validation."""


def vec(L: np.ndarray) -> np.ndarray:
    """Column-major flattening of ``L[..., s, a]`` to ``[..., s + S*a]``."""
    L = np.asarray(L, dtype=float)
    return np.swapaxes(L, -1, -2).reshape(L.shape[:-2] + (L.shape[-2] * L.shape[-1],))


def unvec(x: np.ndarray, n_states: int, n_actions: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.swapaxes(x.reshape(x.shape[:-1] + (n_actions, n_states)), -1, -2)


@dataclass(frozen=True)
class Dimensions:
    horizon: int
    n_follower_states: int
    n_follower_actions: int
    n_leader_states: int
    n_leader_actions: int

    def __post_init__(self):
        for name in ("horizon", "n_follower_states", "n_follower_actions",
                     "n_leader_states", "n_leader_actions"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def K(self) -> int:
        return self.n_follower_states * self.n_follower_actions


@dataclass(frozen=True)
class LipschitzEstimate:
    C: float
    method: str


LeaderRewardFn = Callable[[int, int, int, np.ndarray], float]


@dataclass(frozen=True, eq=False)
class StackelbergModel:
    dims: Dimensions
    kind: str
    follower_initial: np.ndarray          # (S,)
    leader_initial: np.ndarray            # (Sl,)
    p_base: np.ndarray                    # (nA_l, T, S, A, S)
    p_lin: np.ndarray                     # (nA_l, T, S, A, S, K)
    r_base: np.ndarray                    # (nA_l, T+1, S, A)
    r_lin: np.ndarray                     # (nA_l, T+1, S, A, K)
    r_quad: Optional[np.ndarray]          # (nA_l, T+1, S, A, K, K)
    pl_base: np.ndarray                   # (nA_l, T, Sl, Sl)
    pl_lin: np.ndarray                    # (nA_l, T, Sl, Sl, K)
    rl_base: np.ndarray                   # (nA_l, T+1, Sl)
    rl_lin: np.ndarray                    # (nA_l, T+1, Sl, K)
    rl_quad: Optional[np.ndarray]         # (nA_l, T+1, Sl, K, K)
    follower_states: tuple = ()
    follower_actions: tuple = ()
    leader_states: tuple = ()
    leader_actions: tuple = ()
    leader_reward_fn: Optional[LeaderRewardFn] = None
    leader_reward_fn_lipschitz: float = math.inf
    params: dict = field(default_factory=dict)

    # -- convenience -------------------------------------------------------
    @property
    def T(self) -> int:
        return self.dims.horizon

    @property
    def S(self) -> int:
        return self.dims.n_follower_states

    @property
    def A(self) -> int:
        return self.dims.n_follower_actions

    @property
    def K(self) -> int:
        return self.dims.K

    def action_index(self, action) -> int:
        """Resolve a leader action given as an index or a name."""
        if isinstance(action, (int, np.integer)):
            idx = int(action)
        elif isinstance(action, str) and action in self.leader_actions:
            idx = self.leader_actions.index(action)
        elif isinstance(action, str) and action.lstrip("-").isdigit():
            idx = int(action)
        else:
            raise ModelError(f"unknown leader action {action!r}; "
                             f"expected one of {list(self.leader_actions)}")
        if not 0 <= idx < self.dims.n_leader_actions:
            raise ModelError(f"leader action index {idx} out of range "
                             f"[0, {self.dims.n_leader_actions})")
        return idx

    # -- batched evaluation (rows of vecL) ---------------------------------
    def follower_transition_batch(self, a: int, t: int, vL: np.ndarray) -> np.ndarray:
        base = self.p_base[a, t]
        lin = self.p_lin[a, t]
        out = np.broadcast_to(base, (vL.shape[0],) + base.shape)
        if lin.any():
            out = out + np.einsum("sazk,nk->nsaz", lin, vL)
        return out

    def follower_reward_batch(self, a: int, t: int, vL: np.ndarray) -> np.ndarray:
        base = self.r_base[a, t]
        out = np.broadcast_to(base, (vL.shape[0],) + base.shape)
        lin = self.r_lin[a, t]
        if lin.any():
            out = out + np.einsum("sak,nk->nsa", lin, vL)
        if self.r_quad is not None and self.r_quad[a, t].any():
            out = out + np.einsum("nk,sakj,nj->nsa", vL, self.r_quad[a, t], vL)
        return out

    def leader_transition_batch(self, a: int, t: int, vL: np.ndarray) -> np.ndarray:
        base = self.pl_base[a, t]
        out = np.broadcast_to(base, (vL.shape[0],) + base.shape)
        lin = self.pl_lin[a, t]
        if lin.any():
            out = out + np.einsum("szk,nk->nsz", lin, vL)
        return out

    def leader_reward_batch(self, a: int, t: int, vL: np.ndarray) -> np.ndarray:
        if self.leader_reward_fn is not None:
            n_l = self.dims.n_leader_states
            out = np.empty((vL.shape[0], n_l))
            for n in range(vL.shape[0]):
                L = unvec(vL[n], self.S, self.A)
                for s in range(n_l):
                    out[n, s] = self.leader_reward_fn(t, s, a, L)
            return out
        base = self.rl_base[a, t]
        out = np.broadcast_to(base, (vL.shape[0],) + base.shape)
        lin = self.rl_lin[a, t]
        if lin.any():
            out = out + np.einsum("sk,nk->ns", lin, vL)
        if self.rl_quad is not None and self.rl_quad[a, t].any():
            out = out + np.einsum("nk,skj,nj->ns", vL, self.rl_quad[a, t], vL)
        return out

    # -- pointwise evaluation ---------------------------------------------
    def _check(self, t, a, s, s_max, af=None, tmax=None):
        tmax = self.T if tmax is None else tmax
        if not 0 <= t <= tmax:
            raise IndexError(f"t={t} out of range [0, {tmax}]")
        if not 0 <= a < self.dims.n_leader_actions:
            raise IndexError(f"leader action {a} out of range")
        if not 0 <= s < s_max:
            raise IndexError(f"state {s} out of range")
        if af is not None and not 0 <= af < self.A:
            raise IndexError(f"follower action {af} out of range")

    def follower_transition(self, t, a, s, af, L) -> np.ndarray:
        self._check(t, a, s, self.S, af, tmax=self.T - 1)
        return self.follower_transition_batch(a, t, vec(L)[None])[0, s, af].copy()

    def follower_reward(self, t, a, s, af, L) -> float:
        self._check(t, a, s, self.S, af)
        return float(self.follower_reward_batch(a, t, vec(L)[None])[0, s, af])

    def leader_transition(self, t, s, a, L) -> np.ndarray:
        self._check(t, a, s, self.dims.n_leader_states, tmax=self.T - 1)
        return self.leader_transition_batch(a, t, vec(L)[None])[0, s].copy()

    def leader_reward(self, t, s, a, L) -> float:
        self._check(t, a, s, self.dims.n_leader_states)
        return float(self.leader_reward_batch(a, t, vec(L)[None])[0, s])

    def reward_bound(self) -> float:
        """Largest |reward| over the simplex, for tabular parts (vertex bound)."""
        bounds = [_affine_abs_bound(self.r_base, self.r_lin, self.r_quad)]
        if self.leader_reward_fn is None:
            bounds.append(_affine_abs_bound(self.rl_base, self.rl_lin, self.rl_quad))
        return float(max(bounds))

    def with_tables(self, **changes) -> "StackelbergModel":
        """Copy with some tables replaced; the result is re-validated."""
        import dataclasses
        new = dataclasses.replace(self, **changes)
        return _freeze(new)


def _affine_abs_bound(base, lin, quad) -> float:
    # |base + lin.L + L^T Q L| <= |base| + max|lin| + max|Q| on the simplex
    b = np.abs(base) + np.abs(lin).max(axis=-1, initial=0.0)
    if quad is not None:
        b = b + np.abs(quad).max(axis=(-1, -2), initial=0.0)
    return float(b.max(initial=0.0))


# ---------------------------------------------------------------------------
# evaluation helpers (public API)

def eval_transition(model: StackelbergModel, t: int, leader_action: int, s: int,
                    a: int, L) -> np.ndarray:
    return model.follower_transition(t, leader_action, s, a, L)


def eval_leader_transition(model: StackelbergModel, t: int, s: int,
                           leader_action: int, L) -> np.ndarray:
    return model.leader_transition(t, s, leader_action, L)


# ---------------------------------------------------------------------------
# validation

def _freeze(model: StackelbergModel) -> StackelbergModel:
    validate(model)
    for name in ("follower_initial", "leader_initial", "p_base", "p_lin", "r_base",
                 "r_lin", "r_quad", "pl_base", "pl_lin", "rl_base", "rl_lin", "rl_quad"):
        arr = getattr(model, name)
        if arr is not None:
            arr.flags.writeable = False
    return model


def _check_marginal(vecx, what):
    vecx = np.asarray(vecx, dtype=float)
    if vecx.ndim != 1 or not np.all(np.isfinite(vecx)):
        raise ModelError(f"{what}: expected a finite vector")
    if vecx.min() < -SIMPLEX_TOL or abs(vecx.sum() - 1.0) > SIMPLEX_TOL:
        raise ModelError(f"{what}: not a probability vector (sum={vecx.sum():.15g}, "
                         f"min={vecx.min():.3g})")


def validate(model: StackelbergModel) -> None:
    d = model.dims
    T, S, A, K = d.horizon, d.n_follower_states, d.n_follower_actions, d.K
    Sl, nA = d.n_leader_states, d.n_leader_actions
    expected = {
        "follower_initial": (S,), "leader_initial": (Sl,),
        "p_base": (nA, T, S, A, S), "p_lin": (nA, T, S, A, S, K),
        "r_base": (nA, T + 1, S, A), "r_lin": (nA, T + 1, S, A, K),
        "r_quad": (nA, T + 1, S, A, K, K),
        "pl_base": (nA, T, Sl, Sl), "pl_lin": (nA, T, Sl, Sl, K),
        "rl_base": (nA, T + 1, Sl), "rl_lin": (nA, T + 1, Sl, K),
        "rl_quad": (nA, T + 1, Sl, K, K),
    }
    for name, shape in expected.items():
        arr = getattr(model, name)
        if arr is None:
            continue
        if arr.shape != shape:
            raise ModelError(f"{name}: shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"{name}: contains non-finite entries")
    if model.kind not in KINDS:
        raise ModelError(f"kind: unknown kind {model.kind!r}")
    _check_marginal(model.follower_initial, "follower.initial")
    _check_marginal(model.leader_initial, "leader.initial")

    # transitions at every simplex vertex e_k: base + lin[..., k]
    checks = (("follower transition", model.p_base, model.p_lin, model.follower_states,
               model.follower_actions),
              ("leader transition", model.pl_base, model.pl_lin, model.leader_states, None))
    vertex_names = [f"({model.follower_states[k % S]},{model.follower_actions[k // S]})"
                    for k in range(K)]
    for what, base, lin, state_names, action_names in checks:
        at_vertex = base[..., None] + lin       # (..., s', k)
        sums = at_vertex.sum(axis=-2)           # (..., k)
        bad_sum = np.argwhere(np.abs(sums - 1.0) > SIMPLEX_TOL)
        bad_neg = np.argwhere(at_vertex.min(axis=-2) < -SIMPLEX_TOL)
        for bad, reason in ((bad_sum, "does not sum to 1"), (bad_neg, "has a negative entry")):
            if len(bad):
                idx = tuple(int(i) for i in bad[0])
                la, t, s = idx[0], idx[1], idx[2]
                loc = f"leader action {model.leader_actions[la]!r}, t={t}, s={state_names[s]!r}"
                if action_names is not None:
                    loc += f", a={action_names[idx[3]]!r}"
                k = idx[-1]
                val = sums[idx] if reason.startswith("does") else at_vertex[idx[:-1]][:, k].min()
                raise ModelError(f"{what} at {loc}, vertex L=e{vertex_names[k]} "
                                 f"{reason} (got {val:.15g})")


# ---------------------------------------------------------------------------
# Lipschitz constants

def zero_sum_dual_norm(w: np.ndarray) -> np.ndarray:
    """sup |w . D| over zero-sum D with ||D||_inf <= 1, along the last axis.

    Differences of two points of the simplex are exactly (scaled) zero-sum
    vectors, so this is the Lipschitz constant of ``L -> w . L`` in the
    inf-norm on the simplex.
    """
    w = np.sort(np.asarray(w, dtype=float), axis=-1)
    half = w.shape[-1] // 2
    if half == 0:
        return np.zeros(w.shape[:-1])
    return (w[..., ::-1][..., :half] - w[..., :half]).sum(axis=-1)


def _quadratic_constant(lin: np.ndarray, quad: Optional[np.ndarray]) -> float:
    if quad is None:
        return float(zero_sum_dual_norm(lin).max(initial=0.0))
    sym = quad + np.swapaxes(quad, -1, -2)
    # gradient at vertex e_j is lin + sym[..., :, j]; the constant is convex
    # in L so its max over the simplex sits at a vertex
    grads = lin[..., None, :] + np.swapaxes(sym, -1, -2)
    return float(zero_sum_dual_norm(grads).max(initial=0.0))


def estimate_lipschitz(model: StackelbergModel) -> LipschitzEstimate:
    """Common Lipschitz constant of all four model maps in the inf-norm."""
    parts = [
        float(zero_sum_dual_norm(model.p_lin).max(initial=0.0)),
        float(zero_sum_dual_norm(model.pl_lin).max(initial=0.0)),
        _quadratic_constant(model.r_lin, model.r_quad),
    ]
    if model.leader_reward_fn is not None:
        parts.append(float(model.leader_reward_fn_lipschitz))
    else:
        parts.append(_quadratic_constant(model.rl_lin, model.rl_quad))
    return LipschitzEstimate(C=max(parts), method="analytic-affine")


# ---------------------------------------------------------------------------
# construction

def _zeros_model_tables(T, S, A, Sl, nA):
    K = S * A
    return dict(
        p_base=np.zeros((nA, T, S, A, S)), p_lin=np.zeros((nA, T, S, A, S, K)),
        r_base=np.zeros((nA, T + 1, S, A)), r_lin=np.zeros((nA, T + 1, S, A, K)),
        pl_base=np.zeros((nA, T, Sl, Sl)), pl_lin=np.zeros((nA, T, Sl, Sl, K)),
        rl_base=np.zeros((nA, T + 1, Sl)), rl_lin=np.zeros((nA, T + 1, Sl, K)),
    )


def predator_model(epsilon0: float = 0.2, delta_r: float = 0.0, follower_initial=None,
                   two_action: bool = False) -> StackelbergModel:
    """Predator-prey game: prey choose between an exposed and a safe location.

    At t=1 a prey at ``e`` earns ``mu(e) - epsilon0 - delta_r`` and a prey at
    ``s`` earns 1; the time-0 action is the time-1 location. With
    ``two_action`` the predator picks ``g`` (reward ``1 - mu_1(e)``) or ``l``
    (a third of that plus ``(1 - epsilon0)/3``).
    """
    T, S, A, Sl = 1, 2, 2, 1
    nA = 2 if two_action else 1
    tb = _zeros_model_tables(T, S, A, Sl, nA)
    E = 0
    exposed = [E + S * a for a in range(A)]       # k indices with state e
    for la in range(nA):
        for s in range(S):
            for a in range(A):
                tb["p_base"][la, 0, s, a, a] = 1.0
        tb["r_base"][la, 1, 0, :] = -epsilon0 - delta_r
        tb["r_lin"][la, 1, 0, :, exposed] = 1.0
        tb["r_base"][la, 1, 1, :] = 1.0
        tb["pl_base"][la, 0, 0, 0] = 1.0
        if la == 0:
            tb["rl_base"][la, 1, 0] = 1.0
            tb["rl_lin"][la, 1, 0, exposed] = -1.0
        else:
            tb["rl_base"][la, 1, 0] = 1.0 / 3.0 + (1.0 - epsilon0) / 3.0
            tb["rl_lin"][la, 1, 0, exposed] = -1.0 / 3.0
    mu0 = np.full(S, 1.0 / S) if follower_initial is None else np.asarray(follower_initial, float)
    if two_action:
        kind, actions = "builtin:predator-two-action", ("g", "l")
    elif delta_r:
        kind, actions = "builtin:predator-perturbed", ("hunt",)
    else:
        kind, actions = "builtin:predator", ("hunt",)
    model = StackelbergModel(
        dims=Dimensions(T, S, A, Sl, nA), kind=kind,
        follower_initial=mu0, leader_initial=np.ones(1), r_quad=None, rl_quad=None,
        follower_states=("e", "s"), follower_actions=("e", "s"),
        leader_states=("predator",), leader_actions=actions,
        params={"epsilon0": float(epsilon0), "delta_r": float(delta_r)}, **tb)
    return _freeze(model)


def majority_model(n: int = 2, r: Sequence[float] = (1.0, 1.0), horizon: int = 1,
                   leader_action_grid: Optional[Sequence[Sequence[float]]] = None,
                   follower_initial=None) -> StackelbergModel:
    """Following-the-majority game with the leader choosing the reward vector.

    Each leader action is a reward vector ``(r^1, ..., r^n)``. Followers move
    deterministically to the state named by their action; at t >= 1 a
    follower at ``i`` playing ``i`` earns ``r^i (1 - ||L - e_ii||^2 / 2)``.
    For n = 2 the leader earns ``r^2 - r^1`` when everyone gathers at 1 and
    ``r^1 - r^2`` when everyone gathers at 2; for other n her reward is 0.
    """
    grid = [list(r)] if leader_action_grid is None else [list(g) for g in leader_action_grid]
    for g in grid:
        if len(g) != n:
            raise ModelError(f"params.leader_action_grid: entry {g} has length {len(g)}, "
                             f"expected n={n}")
        if min(g) <= 0:
            raise ModelError(f"params.leader_action_grid: rewards must be positive, got {g}")
    T, S, A, Sl, nA = horizon, n, n, 1, len(grid)
    K = S * A
    tb = _zeros_model_tables(T, S, A, Sl, nA)
    quad = np.zeros((nA, T + 1, S, A, K, K))
    for la, rv in enumerate(grid):
        for t in range(T):
            for i in range(S):
                for j in range(A):
                    tb["p_base"][la, t, i, j, j] = 1.0
        for t in range(1, T + 1):
            for i in range(n):
                k = i + S * i
                tb["r_base"][la, t, i, i] = rv[i] / 2.0
                tb["r_lin"][la, t, i, i, k] = rv[i]
                quad[la, t, i, i] = -rv[i] / 2.0 * np.eye(K)
        tb["pl_base"][la, :, 0, 0] = 1.0

    gathered = [unvec(np.eye(K)[i + S * i], S, A) for i in range(n)]

    def leader_reward(t, s, la, L):
        if n != 2:
            return 0.0
        r1, r2 = grid[la]
        if np.abs(L - gathered[0]).max() <= 1e-9:
            return r2 - r1
        if np.abs(L - gathered[1]).max() <= 1e-9:
            return r1 - r2
        return 0.0

    mu0 = np.full(S, 1.0 / S) if follower_initial is None else np.asarray(follower_initial, float)
    names = tuple(str(i + 1) for i in range(n))
    model = StackelbergModel(
        dims=Dimensions(T, S, A, Sl, nA), kind="builtin:majority",
        follower_initial=mu0, leader_initial=np.ones(1), r_quad=quad, rl_quad=None,
        follower_states=names, follower_actions=names, leader_states=("leader",),
        leader_actions=tuple("r=(" + ",".join(f"{x:g}" for x in g) + ")" for g in grid),
        leader_reward_fn=leader_reward, leader_reward_fn_lipschitz=math.inf,
        params={"n": n, "leader_action_grid": grid}, **tb)
    return _freeze(model)


def random_affine_model(rng: np.random.Generator, n_states: int = 2, n_actions: int = 2,
                        horizon: int = 1, n_leader_states: int = 1, n_leader_actions: int = 1,
                        coupling: float = 0.5, quadratic: bool = False) -> StackelbergModel:
    """Random affine model with all rewards in [-1, 1] on the simplex.

    Transition coefficients are built as ``lam * (q_k - base)`` with
    ``q_k`` in the simplex, which keeps every ``P(L)`` a distribution.
    """
    T, S, A, Sl, nA = horizon, n_states, n_actions, n_leader_states, n_leader_actions
    K = S * A

    def affine_rows(shape, width):
        base = rng.dirichlet(np.ones(width), size=shape)
        q = rng.dirichlet(np.ones(width), size=shape + (K,))     # (..., K, width)
        lam = coupling * rng.uniform(size=shape + (1, 1))
        lin = lam * (q - base[..., None, :])
        return base, np.swapaxes(lin, -1, -2)

    p_base, p_lin = affine_rows((nA, T, S, A), S)
    pl_base, pl_lin = affine_rows((nA, T, Sl), Sl)
    scale = 0.5 if not quadratic else 1.0 / 3.0
    r_base = rng.uniform(-scale, scale, size=(nA, T + 1, S, A))
    r_lin = coupling * rng.uniform(-scale, scale, size=(nA, T + 1, S, A, K))
    rl_base = rng.uniform(-scale, scale, size=(nA, T + 1, Sl))
    rl_lin = coupling * rng.uniform(-scale, scale, size=(nA, T + 1, Sl, K))
    r_quad = rl_quad = None
    if quadratic:
        r_quad = coupling * rng.uniform(-scale, scale, size=(nA, T + 1, S, A, K, K))
        rl_quad = coupling * rng.uniform(-scale, scale, size=(nA, T + 1, Sl, K, K))
    model = StackelbergModel(
        dims=Dimensions(T, S, A, Sl, nA), kind="affine+quadratic" if quadratic else "affine",
        follower_initial=rng.dirichlet(np.ones(S)), leader_initial=rng.dirichlet(np.ones(Sl)),
        p_base=p_base, p_lin=p_lin, r_base=r_base, r_lin=r_lin, r_quad=r_quad,
        pl_base=pl_base, pl_lin=pl_lin, rl_base=rl_base, rl_lin=rl_lin, rl_quad=rl_quad,
        follower_states=tuple(f"s{i}" for i in range(S)),
        follower_actions=tuple(f"a{i}" for i in range(A)),
        leader_states=tuple(f"l{i}" for i in range(Sl)),
        leader_actions=tuple(f"g{i}" for i in range(nA)))
    return _freeze(model)


# ---------------------------------------------------------------------------
# JSON config

_SPACE = {
    "type": "object",
    "required": ["states", "actions"],
    "properties": {
        "states": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "actions": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "initial": {"type": "array", "items": {"type": "number"}},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "horizon": {"type": "integer"},
        "kind": {"enum": list(KINDS)},
        "follower": _SPACE,
        "leader": _SPACE,
        "tables": {"type": "array", "items": {"type": "object"}, "minItems": 1},
        "params": {
            "type": "object",
            "properties": {
                "epsilon0": {"type": "number", "minimum": 0},
                "delta_r": {"type": "number", "minimum": 0},
                "n": {"type": "integer", "minimum": 1},
                "r": {"type": "array", "items": {"type": "number"}},
                "leader_action_grid": {"type": "array",
                                       "items": {"type": "array", "items": {"type": "number"}}},
            },
        },
    },
    "allOf": [{
        "if": {"properties": {"kind": {"enum": ["affine", "affine+quadratic"]}}},
        "then": {"required": ["horizon", "follower", "leader", "tables"]},
    }],
}

_TABLE_KEYS = {
    # key: (leading dims builder, required)
    "p_base": True, "p_lin": False, "r_base": True, "r_lin": False, "r_quad": False,
    "pl_base": True, "pl_lin": False, "rl_base": True, "rl_lin": False, "rl_quad": False,
}


def load_model(config_text: str) -> StackelbergModel:
    """Parse and validate a JSON model config."""
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"config is not valid JSON: {exc}") from None
    return model_from_config(cfg)


def model_from_config(cfg: dict) -> StackelbergModel:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ModelError(f"schema violation at {path}: {err.message}")
    kind = cfg["kind"]
    if "horizon" in cfg and cfg["horizon"] < 1:
        raise ModelError(f"horizon: must be >= 1, got {cfg['horizon']}")
    params = cfg.get("params", {})
    follower_initial = cfg.get("follower", {}).get("initial")
    if kind.startswith("builtin:predator"):
        if cfg.get("horizon", 1) != 1:
            raise ModelError("horizon: predator models have horizon 1")
        return predator_model(epsilon0=params.get("epsilon0", 0.2),
                              delta_r=params.get("delta_r", 0.0),
                              follower_initial=follower_initial,
                              two_action=kind == "builtin:predator-two-action")
    if kind == "builtin:majority":
        return majority_model(n=params.get("n", 2), r=params.get("r", [1.0] * params.get("n", 2)),
                              horizon=cfg.get("horizon", 1),
                              leader_action_grid=params.get("leader_action_grid"),
                              follower_initial=follower_initial)
    return _tabular_from_config(cfg)


def _tabular_from_config(cfg: dict) -> StackelbergModel:
    T = cfg["horizon"]
    fol, lead = cfg["follower"], cfg["leader"]
    S, A = len(fol["states"]), len(fol["actions"])
    Sl, nA = len(lead["states"]), len(lead["actions"])
    K = S * A
    tables = cfg["tables"]
    if len(tables) != nA:
        raise ModelError(f"tables: {len(tables)} entries, expected one per leader action ({nA})")
    shapes = {
        "p_base": (T, S, A, S), "p_lin": (T, S, A, S, K),
        "r_base": (T + 1, S, A), "r_lin": (T + 1, S, A, K), "r_quad": (T + 1, S, A, K, K),
        "pl_base": (T, Sl, Sl), "pl_lin": (T, Sl, Sl, K),
        "rl_base": (T + 1, Sl), "rl_lin": (T + 1, Sl, K), "rl_quad": (T + 1, Sl, K, K),
    }
    stacked = {}
    for key, shape in shapes.items():
        per_action = []
        for la, tab in enumerate(tables):
            path = f"tables/{la}/{key}"
            if key not in tab:
                if _TABLE_KEYS[key]:
                    raise ModelError(f"schema violation at {path}: missing required table")
                per_action.append(None)
                continue
            try:
                arr = np.asarray(tab[key], dtype=float)
            except (TypeError, ValueError):
                raise ModelError(f"schema violation at {path}: ragged or non-numeric") from None
            # transitions may list t = 0..T; the last step is never used
            if key.startswith("p") and arr.ndim == len(shape) and arr.shape[0] == T + 1:
                arr = arr[:T]
            if arr.shape != shape:
                raise ModelError(f"schema violation at {path}: shape {arr.shape}, "
                                 f"expected {shape}")
            per_action.append(arr)
        if all(a is None for a in per_action):
            stacked[key] = None if key.endswith("quad") else np.zeros((nA,) + shape)
        else:
            stacked[key] = np.stack([np.zeros(shape) if a is None else a for a in per_action])
    if cfg["kind"] == "affine" and (stacked["r_quad"] is not None or stacked["rl_quad"] is not None):
        raise ModelError("kind: quadratic tables require kind 'affine+quadratic'")
    mu0 = fol.get("initial", [1.0 / S] * S)
    nu0 = lead.get("initial", [1.0 / Sl] * Sl)
    if len(mu0) != S or len(nu0) != Sl:
        raise ModelError("initial: length does not match the number of states")
    model = StackelbergModel(
        dims=Dimensions(T, S, A, Sl, nA), kind=cfg["kind"],
        follower_initial=np.asarray(mu0, float), leader_initial=np.asarray(nu0, float),
        follower_states=tuple(fol["states"]), follower_actions=tuple(fol["actions"]),
        leader_states=tuple(lead["states"]), leader_actions=tuple(lead["actions"]),
        **stacked)
    return _freeze(model)


def model_to_config(model: StackelbergModel) -> dict:
    """Inverse of ``model_from_config``."""
    if model.kind.startswith("builtin:"):
        cfg = {"kind": model.kind, "horizon": model.T,
               "follower": {"states": list(model.follower_states),
                            "actions": list(model.follower_actions),
                            "initial": model.follower_initial.tolist()},
               "params": dict(model.params)}
        return cfg
    tables = []
    for la in range(model.dims.n_leader_actions):
        tab = {}
        for key in ("p_base", "p_lin", "r_base", "r_lin", "r_quad",
                    "pl_base", "pl_lin", "rl_base", "rl_lin", "rl_quad"):
            arr = getattr(model, key)
            if arr is not None:
                tab[key] = arr[la].tolist()
        tables.append(tab)
    return {
        "horizon": model.T, "kind": model.kind,
        "follower": {"states": list(model.follower_states),
                     "actions": list(model.follower_actions),
                     "initial": model.follower_initial.tolist()},
        "leader": {"states": list(model.leader_states), "actions": list(model.leader_actions),
                   "initial": model.leader_initial.tolist()},
        "tables": tables,
    }
