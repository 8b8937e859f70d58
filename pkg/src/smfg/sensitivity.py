"""Model perturbations, deviation bounds and the relaxed leader problem.

A ``(delta_p, delta_r)`` perturbation moves every transition probability and
initial mass by at most ``delta_p`` and every reward by at most ``delta_r``,
uniformly in the flow argument. With ``C`` the Lipschitz constant of the
unperturbed model and ``S`` the larger state-space size, flows under a
shared policy stay within ``(C+S+1)^t delta_p`` and follower values within
``(C+S)(1+C+S)^(T+2) delta_p + (T+1) delta_r``. Relaxing the equilibrium
tolerance by ``eps'`` with ``B = (C+S)(1+C+S)^(T+1) delta_p + (T+1) delta_r
<= eps'/2`` sandwiches the true worst-case value between perturbed ones.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import leader_marginals_batch, propagate_batch, validate_policy
from .equilibrium import (CandidatePool, DeterministicPolicies, MeshPolicies, VALUE_TIE,
                          free_rows)
from .mdp import follower_value
from .model import (ModelError, StackelbergModel, estimate_lipschitz, predator_model, vec)
from .solver import (SolverResolutionError, Strategy, inner_worst_case, outer_maximize,
                     report_from_pool)

PERTURB_MODES = ("random-seeded", "builtin-example2", "builtin-example3")
BOUND_SLACK = 1e-12
SANDWICH_SLACK = 1e-9


class InadmissibleError(ValueError):
    """The perturbation size and relaxation violate the admissibility premise."""


class PerturbationError(ValueError):
    """A perturbed model moved some entry further than allowed."""


@dataclass(frozen=True)
class PerturbationSpec:
    delta_p: float = 0.0
    delta_r: float = 0.0
    mode: str = "random-seeded"
    seed: int = 0

    def __post_init__(self):
        if self.delta_p < 0 or self.delta_r < 0:
            raise ValueError("delta_p and delta_r must be nonnegative")
        if self.mode not in PERTURB_MODES:
            raise ValueError(f"perturbation mode must be one of {PERTURB_MODES}")

    def scaled(self, factor: float) -> "PerturbationSpec":
        return PerturbationSpec(self.delta_p * factor, self.delta_r * factor, self.mode,
                                self.seed)

    def to_json(self) -> dict:
        return {"delta_p": self.delta_p, "delta_r": self.delta_r, "mode": self.mode,
                "seed": self.seed}


# -- perturbation ---------------------------------------------------------------

def _mix(x, rng, delta, lin=None):
    """Convex mix of distribution rows toward random simplex points."""
    q = rng.dirichlet(np.ones(x.shape[-1]), size=x.shape[:-1])
    if delta == 0:
        return x, lin
    return (1 - delta) * x + delta * q, None if lin is None else (1 - delta) * lin


def _shift(x, rng, delta):
    u = rng.uniform(-1.0, 1.0, size=x.shape)
    return x if delta == 0 else x + delta * u


def perturb_model(model: StackelbergModel, spec: PerturbationSpec,
                  verify_samples: int = 1000) -> StackelbergModel:
    """A ``(delta_p, delta_r)`` perturbation of ``model``.

    Random mode mixes each transition row and initial distribution toward a
    seeded random distribution with weight ``delta_p`` (so each entry moves
    by at most ``delta_p`` and rows stay on the simplex) and shifts rewards
    by seeded amounts in ``[-delta_r, delta_r]``.
    """
    if spec.mode == "builtin-example2":
        if model.kind not in ("builtin:predator", "builtin:predator-perturbed"):
            raise ModelError(f"builtin-example2 perturbs the predator model, not {model.kind}")
        p = model.params
        out = predator_model(p["epsilon0"], p.get("delta_r", 0.0) + spec.delta_r,
                             follower_initial=model.follower_initial)
    elif spec.mode == "builtin-example3":
        if model.kind != "builtin:predator-two-action":
            raise ModelError(f"builtin-example3 perturbs the two-action predator model, "
                             f"not {model.kind}")
        p = model.params
        out = predator_model(p["epsilon0"], p.get("delta_r", 0.0) + spec.delta_r,
                             follower_initial=model.follower_initial, two_action=True)
    else:
        if model.leader_reward_fn is not None:
            raise ModelError("random perturbation needs tabular leader rewards; "
                             f"{model.kind} uses a closure")
        rng = np.random.default_rng(spec.seed)
        dp, dr = spec.delta_p, spec.delta_r
        p_base, p_lin = _mix(model.p_base, rng, dp, model.p_lin)
        pl_base, pl_lin = _mix(model.pl_base, rng, dp, model.pl_lin)
        mu_f, _ = _mix(model.follower_initial, rng, dp)
        mu_l, _ = _mix(model.leader_initial, rng, dp)
        kind = "affine+quadratic" if (model.r_quad is not None or model.rl_quad is not None) \
            else "affine"
        out = model.with_tables(
            kind=kind, p_base=p_base, p_lin=p_lin, pl_base=pl_base, pl_lin=pl_lin,
            follower_initial=mu_f, leader_initial=mu_l,
            r_base=_shift(model.r_base, rng, dr), rl_base=_shift(model.rl_base, rng, dr))
    params = dict(out.params)
    params["perturbation"] = spec.to_json()
    out = out.with_tables(params=params)
    if verify_samples:
        verify_perturbation(model, out, spec.delta_p, spec.delta_r, verify_samples, spec.seed)
    return out


def simplex_samples(K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random points of the K-simplex plus all its vertices."""
    return np.vstack([rng.dirichlet(np.ones(K), size=n), np.eye(K)])


def perturbation_size(model: StackelbergModel, perturbed: StackelbergModel,
                      n_samples: int = 1000, seed: int = 0) -> dict:
    """Largest observed entrywise changes of transitions, initials and rewards."""
    if model.dims != perturbed.dims:
        raise ValueError(f"dimension mismatch {model.dims} vs {perturbed.dims}")
    vL = simplex_samples(model.K, n_samples, np.random.default_rng(seed))
    dp = max(float(np.abs(model.follower_initial - perturbed.follower_initial).max()),
             float(np.abs(model.leader_initial - perturbed.leader_initial).max()))
    dr = 0.0
    for a in range(model.dims.n_leader_actions):
        for t in range(model.T + 1):
            if t < model.T:
                dp = max(dp, float(np.abs(model.follower_transition_batch(a, t, vL)
                                          - perturbed.follower_transition_batch(a, t, vL)).max()),
                         float(np.abs(model.leader_transition_batch(a, t, vL)
                                      - perturbed.leader_transition_batch(a, t, vL)).max()))
            dr = max(dr, float(np.abs(model.follower_reward_batch(a, t, vL)
                                      - perturbed.follower_reward_batch(a, t, vL)).max()),
                     float(np.abs(model.leader_reward_batch(a, t, vL)
                                  - perturbed.leader_reward_batch(a, t, vL)).max()))
    return {"delta_p": dp, "delta_r": dr}


def verify_perturbation(model, perturbed, delta_p, delta_r, n_samples=1000, seed=0) -> dict:
    size = perturbation_size(model, perturbed, n_samples, seed)
    if size["delta_p"] > delta_p + BOUND_SLACK or size["delta_r"] > delta_r + BOUND_SLACK:
        raise PerturbationError(f"observed changes {size} exceed delta_p={delta_p}, "
                                f"delta_r={delta_r}")
    return size


# -- bounds -----------------------------------------------------------------------

def bound_constants(model: StackelbergModel) -> tuple[float, int]:
    C = estimate_lipschitz(model).C
    S = max(model.dims.n_leader_states, model.S)
    return C, S


def theorem_margin(C: float, S: int, T: int, delta_p: float, delta_r: float,
                   exponent: int | None = None) -> float:
    """``(C+S)(1+C+S)^(T+1) delta_p + (T+1) delta_r`` (exponent overridable)."""
    e = T + 1 if exponent is None else exponent
    p_term = 0.0 if delta_p == 0 else (C + S) * (1 + C + S) ** e * delta_p
    return p_term + (T + 1) * delta_r


def admissibility(model, delta_p, delta_r, epsilon_prime) -> dict:
    C, S = bound_constants(model)
    B = theorem_margin(C, S, model.T, delta_p, delta_r)
    return {"margin": B, "half_epsilon_prime": epsilon_prime / 2,
            "admissible": bool(B <= epsilon_prime / 2)}


@dataclass
class BoundCheckReport:
    C: float
    S: int
    T: int
    delta_p: float
    delta_r: float
    flow: list | None = None
    value: dict | None = None
    sandwich: dict | None = None
    admissibility: dict | None = None
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def merge(self, other: "BoundCheckReport") -> "BoundCheckReport":
        for name in ("flow", "value", "sandwich", "admissibility"):
            if getattr(other, name) is not None:
                setattr(self, name, getattr(other, name))
        self.violations.extend(other.violations)
        return self

    def max_ratio(self, part: str) -> float:
        if part == "flow":
            return max((row["ratio"] for row in self.flow or []), default=0.0)
        return (self.value or {}).get("ratio", 0.0)

    def to_json(self) -> dict:
        return {"C": self.C, "S": self.S, "T": self.T, "delta_p": self.delta_p,
                "delta_r": self.delta_r, "flow": self.flow, "value": self.value,
                "sandwich": self.sandwich, "admissibility": self.admissibility,
                "violations": self.violations, "passed": self.passed}


def _ratio(obs: float, bound: float) -> float:
    if obs <= BOUND_SLACK:
        return 0.0
    return math.inf if bound == 0 else obs / bound


def _deltas(perturbed, delta_p, delta_r):
    meta = perturbed.params.get("perturbation", {})
    dp = meta.get("delta_p", 0.0) if delta_p is None else delta_p
    dr = meta.get("delta_r", 0.0) if delta_r is None else delta_r
    return float(dp), float(dr)


def check_flow_deviation(model: StackelbergModel, perturbed: StackelbergModel, leader_action,
                         policy, delta_p: float | None = None,
                         delta_r: float | None = None) -> BoundCheckReport:
    """Flows and leader marginals of one policy under both models, against
    ``(C+S+1)^t delta_p``."""
    dp, dr = _deltas(perturbed, delta_p, delta_r)
    C, S = bound_constants(model)
    a = model.action_index(leader_action)
    policy = validate_policy(model, policy)[None]
    d, _ = propagate_batch(model, a, policy)
    dh, _ = propagate_batch(perturbed, a, policy)
    nu = leader_marginals_batch(model, a, d)[0]
    nuh = leader_marginals_batch(perturbed, a, dh)[0]
    d, dh = d[0], dh[0]
    report = BoundCheckReport(C=C, S=S, T=model.T, delta_p=dp, delta_r=dr, flow=[])
    for t in range(model.T + 1):
        gaps = {"flow": np.abs(d[t] - dh[t]),
                "follower_marginal": np.abs(d[t].sum(-1) - dh[t].sum(-1)),
                "leader_marginal": np.abs(nu[t] - nuh[t])}
        where, obs = max(((k, float(v.max())) for k, v in gaps.items()), key=lambda kv: kv[1])
        bound = (C + S + 1) ** t * dp if dp else 0.0
        row = {"t": t, "observed": obs, "bound": bound, "ratio": _ratio(obs, bound),
               "worst": where}
        report.flow.append(row)
        if obs > bound + BOUND_SLACK:
            s, af = np.unravel_index(np.argmax(gaps["flow"]), gaps["flow"].shape)
            report.violations.append(
                {"check": "flow", "t": t, "s": int(s), "a": int(af), "quantity": where,
                 "observed": obs, "bound": bound})
    return report


def check_value_deviation(model: StackelbergModel, perturbed: StackelbergModel, leader_action,
                          policy, delta_p: float | None = None,
                          delta_r: float | None = None) -> BoundCheckReport:
    """Follower values against the shared-policy flows of both models."""
    dp, dr = _deltas(perturbed, delta_p, delta_r)
    C, S = bound_constants(model)
    a = model.action_index(leader_action)
    policy = validate_policy(model, policy)[None]
    d, _ = propagate_batch(model, a, policy)
    dh, _ = propagate_batch(perturbed, a, policy)
    obs = abs(follower_value(model, a, d[0]) - follower_value(perturbed, a, dh[0]))
    bound = theorem_margin(C, S, model.T, dp, dr, exponent=model.T + 2)
    tight = theorem_margin(C, S, model.T, dp, dr, exponent=model.T + 1)
    report = BoundCheckReport(C=C, S=S, T=model.T, delta_p=dp, delta_r=dr)
    report.value = {"observed": obs, "bound": bound, "ratio": _ratio(obs, bound),
                    "bound_exponent_T_plus_1": tight, "ratio_T_plus_1": _ratio(obs, tight)}
    if obs > bound + BOUND_SLACK:
        report.violations.append({"check": "value", "observed": obs, "bound": bound})
    return report


# -- sandwich ----------------------------------------------------------------------

def shared_pools(model: StackelbergModel, perturbed: StackelbergModel, a: int,
                 strategy: Strategy) -> tuple:
    """Candidate pools for both models over one common policy set."""
    if strategy.name == "enumerate":
        src = DeterministicPolicies(model, strategy.cap)
        srch = src
    else:
        relevant = free_rows(model, a) | free_rows(perturbed, a)
        src = MeshPolicies(model, a, strategy.h, strategy.cap, relevant)
        srch = MeshPolicies(perturbed, a, strategy.h, strategy.cap, relevant)
    return (CandidatePool(model, a, src, strategy.threads),
            CandidatePool(perturbed, a, srch, strategy.threads))


def _solve(model, a, eps, mode, strategy, pool):
    if pool is not None:
        return report_from_pool(model, a, eps, mode, pool, strategy)
    return inner_worst_case(model, a, eps, strategy, mode)


def check_theorem_sandwich(model: StackelbergModel, perturbed: StackelbergModel, leader_action,
                           epsilon: float, epsilon_prime: float,
                           strategy: Strategy | None = None, delta_p: float | None = None,
                           delta_r: float | None = None,
                           mode: str = "pessimistic") -> BoundCheckReport:
    """``J_eps >= J^_(eps+eps') - B`` and, when ``eps >= eps'``,
    ``J_eps <= J^_(eps-eps') + B``, each widened by the solver resolution."""
    strategy = strategy or Strategy()
    dp, dr = _deltas(perturbed, delta_p, delta_r)
    adm = admissibility(model, dp, dr, epsilon_prime)
    if epsilon_prime <= 0 or not adm["admissible"]:
        raise InadmissibleError(
            f"margin {adm['margin']:.6g} exceeds eps'/2 = {epsilon_prime / 2:.6g} "
            f"(delta_p={dp}, delta_r={dr}); the sandwich would be vacuous")
    C, S = bound_constants(model)
    B = adm["margin"]
    a = model.action_index(leader_action)
    pool = poolh = None
    if strategy.name != "local":
        pool, poolh = shared_pools(model, perturbed, a, strategy)
    J = _solve(model, a, epsilon, mode, strategy, pool)
    Jp = _solve(perturbed, a, epsilon + epsilon_prime, mode, strategy, poolh)
    report = BoundCheckReport(C=C, S=S, T=model.T, delta_p=dp, delta_r=dr, admissibility=adm)
    res = J.resolution + Jp.resolution
    low = {"J": J.value, "J_hat": Jp.value, "margin": B, "resolution": res,
           "slack": J.value - (Jp.value - B) + res}
    report.sandwich = {"epsilon": epsilon, "epsilon_prime": epsilon_prime, "lower": low}
    if low["slack"] < -SANDWICH_SLACK:
        report.violations.append({"check": "sandwich-lower", **low})
    if epsilon >= epsilon_prime:
        try:
            Jm = _solve(perturbed, a, epsilon - epsilon_prime, mode, strategy, poolh)
        except SolverResolutionError as exc:
            report.sandwich["upper"] = {"skipped": str(exc)}
        else:
            res = J.resolution + Jm.resolution
            high = {"J": J.value, "J_hat": Jm.value, "margin": B, "resolution": res,
                    "slack": Jm.value + B - J.value + res}
            report.sandwich["upper"] = high
            if high["slack"] < -SANDWICH_SLACK:
                report.violations.append({"check": "sandwich-upper", **high})
    else:
        report.sandwich["upper"] = {"skipped": "epsilon < epsilon_prime"}
    return report


# -- relaxed leader problem --------------------------------------------------------

@dataclass
class RelaxedReport:
    epsilon: float
    epsilon_prime: float
    true_action: int
    true_value: float
    relaxed_action: int
    relaxed_true_value: float
    relaxed_gap: float
    unrelaxed_action: int
    unrelaxed_true_value: float
    unrelaxed_gap: float
    perturbed_relaxed: list
    perturbed_unrelaxed: list
    true_values: list
    action_names: tuple
    admissibility: dict
    seconds: float = 0.0
    corollary: list | None = None

    def to_json(self, timestamp: bool = True) -> dict:
        n = self.action_names
        out = {k: getattr(self, k) for k in (
            "epsilon", "epsilon_prime", "true_value", "relaxed_true_value", "relaxed_gap",
            "unrelaxed_true_value", "unrelaxed_gap", "perturbed_relaxed",
            "perturbed_unrelaxed", "true_values", "admissibility", "corollary")}
        out.update(true_action=n[self.true_action], relaxed_action=n[self.relaxed_action],
                   unrelaxed_action=n[self.unrelaxed_action],
                   seconds=self.seconds if timestamp else 0.0)
        return out


def _argmax(values):
    best = 0
    for i, v in enumerate(values):
        if v > values[best] + VALUE_TIE:
            best = i
    return best


def _action_values(model, eps, mode, strategy, pools):
    return [_solve(model, a, eps, mode, strategy, pools[a] if pools else None).value
            for a in range(model.dims.n_leader_actions)]


def relaxed_action_experiment(model: StackelbergModel, perturbed: StackelbergModel,
                              epsilon: float, epsilon_prime: float,
                              strategy: Strategy | None = None, delta_p: float | None = None,
                              delta_r: float | None = None,
                              mode: str = "pessimistic") -> RelaxedReport:
    """Pick the leader action on the perturbed model, with and without relaxing
    the tolerance by ``epsilon_prime``, and score it on the true model."""
    strategy = strategy or Strategy()
    t0 = time.perf_counter()
    dp, dr = _deltas(perturbed, delta_p, delta_r)
    adm = admissibility(model, dp, dr, epsilon_prime)
    if not adm["admissible"]:
        raise InadmissibleError(f"margin {adm['margin']:.6g} exceeds eps'/2 = "
                                f"{epsilon_prime / 2:.6g}")
    pools = poolsh = None
    if strategy.name != "local":
        pairs = [shared_pools(model, perturbed, a, strategy)
                 for a in range(model.dims.n_leader_actions)]
        pools, poolsh = [p for p, _ in pairs], [q for _, q in pairs]
    true_values = _action_values(model, epsilon, mode, strategy, pools)
    relaxed = _action_values(perturbed, epsilon + epsilon_prime, mode, strategy, poolsh)
    unrelaxed = _action_values(perturbed, epsilon, mode, strategy, poolsh)
    a_true, a_rel, a_unrel = _argmax(true_values), _argmax(relaxed), _argmax(unrelaxed)
    V = true_values[a_true]
    return RelaxedReport(
        epsilon=epsilon, epsilon_prime=epsilon_prime, true_action=a_true, true_value=V,
        relaxed_action=a_rel, relaxed_true_value=true_values[a_rel],
        relaxed_gap=V - true_values[a_rel], unrelaxed_action=a_unrel,
        unrelaxed_true_value=true_values[a_unrel], unrelaxed_gap=V - true_values[a_unrel],
        perturbed_relaxed=relaxed, perturbed_unrelaxed=unrelaxed, true_values=true_values,
        action_names=model.leader_actions, admissibility=adm,
        seconds=time.perf_counter() - t0)


def corollary_sweep(model: StackelbergModel, spec: PerturbationSpec, epsilon: float,
                    epsilon_prime: float, strategy: Strategy | None = None,
                    steps: int = 6, mode: str = "pessimistic") -> list:
    """Relaxed-action gaps as ``(delta_p, delta_r, eps')`` shrink together by halves."""
    rows = []
    for k in range(steps):
        f = 0.5 ** k
        sp = spec.scaled(f)
        pert = perturb_model(model, sp)
        rep = relaxed_action_experiment(model, pert, epsilon, epsilon_prime * f, strategy,
                                        mode=mode)
        rows.append({"delta_p": sp.delta_p, "delta_r": sp.delta_r,
                     "epsilon_prime": epsilon_prime * f,
                     "relaxed_action": model.leader_actions[rep.relaxed_action],
                     "gap": rep.relaxed_gap})
    return rows


def gaps_nonincreasing(rows: list, tol: float = 1e-12) -> bool:
    return all(b["gap"] <= a["gap"] + tol for a, b in zip(rows, rows[1:]))


# -- epsilon sweeps ----------------------------------------------------------------

@dataclass
class Jump:
    left_epsilon: float
    right_epsilon: float
    left_value: float
    right_value: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SweepResult:
    epsilons: list
    values: list
    actions: list
    guarantee: str
    mode: str
    jumps: list
    monotone: bool
    violations: list

    def rows(self) -> list:
        return [(e, v, a, self.guarantee) for e, v, a in zip(self.epsilons, self.values,
                                                            self.actions)]

    def to_json(self) -> dict:
        return {"mode": self.mode, "guarantee": self.guarantee, "monotone": self.monotone,
                "violations": self.violations,
                "rows": [{"epsilon": e, "value": v, "action": a, "guarantee": g}
                         for e, v, a, g in self.rows()],
                "jumps": [j.to_json() for j in self.jumps]}


def _value_function(model, action, strategy, mode):
    """``eps -> (value, action name)`` for one action or the outer problem."""
    actions = range(model.dims.n_leader_actions) if action is None \
        else [model.action_index(action)]
    names = model.leader_actions
    if strategy.name == "local":
        def f(eps):
            reps = [inner_worst_case(model, a, eps, strategy, mode) for a in actions]
            i = _argmax([r.value for r in reps])
            return reps[i].value, names[reps[i].action]
        return f, "local"
    from .solver import build_pool
    pools = [build_pool(model, a, strategy) for a in actions]

    def f(eps):
        vals = [p.value(eps, mode) for p in pools]
        if any(v is None for v in vals):
            missing = names[list(actions)[vals.index(None)]]
            raise SolverResolutionError(f"no {eps:g}-equilibrium for action {missing!r}")
        i = _argmax(vals)
        return vals[i], names[list(actions)[i]]
    return f, pools[0].source.guarantee


def epsilon_sweep(model: StackelbergModel, epsilons, action=None,
                  strategy: Strategy | None = None, mode: str = "pessimistic",
                  jump_tol: float = 1e-2, refine_width: float = 1e-9,
                  max_bisect: int = 60) -> SweepResult:
    """Values over a sorted tolerance grid, monotonicity check and jump search.

    An interval whose value drops by more than ``jump_tol`` is bisected
    toward the point where most of the drop occurs; it is flagged as a jump
    when the drop across the refined interval is still at least
    ``max(jump_tol, half the original drop)``.
    """
    strategy = strategy or Strategy()
    eps = [float(e) for e in epsilons]
    if any(e < 0 for e in eps) or any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilon grid must be sorted and nonnegative")
    f, guarantee = _value_function(model, action, strategy, mode)
    sign = 1.0 if mode == "pessimistic" else -1.0
    values, actions = zip(*(f(e) for e in eps)) if eps else ((), ())
    values, actions = list(values), list(actions)
    violations = [{"left": eps[i], "right": eps[i + 1], "increase": sign * (values[i + 1]
                                                                           - values[i])}
                  for i in range(len(eps) - 1)
                  if sign * (values[i + 1] - values[i]) > VALUE_TIE]
    jumps = []
    for i in range(len(eps) - 1):
        drop = abs(values[i] - values[i + 1])
        if drop <= jump_tol:
            continue
        lo, hi, vlo, vhi = eps[i], eps[i + 1], values[i], values[i + 1]
        for _ in range(max_bisect):
            if hi - lo <= refine_width:
                break
            mid = 0.5 * (lo + hi)
            vmid = f(mid)[0]
            if abs(vlo - vmid) >= abs(vmid - vhi):
                hi, vhi = mid, vmid
            else:
                lo, vlo = mid, vmid
        if abs(vlo - vhi) >= max(jump_tol, 0.5 * drop):
            jumps.append(Jump(lo, hi, vlo, vhi))
    return SweepResult(epsilons=eps, values=values, actions=actions, guarantee=guarantee,
                       mode=mode, jumps=jumps, monotone=not violations, violations=violations)
