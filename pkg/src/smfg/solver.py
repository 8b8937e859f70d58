"""Leader problems: worst case over the followers' epsilon-equilibria, then the
best leader action.

Three strategies generate candidates. ``enumerate`` scans deterministic
policies, ``mesh`` scans a simplex mesh of spacing ``h``, and ``local``
seeds penalized coordinate descent from the best mesh or enumeration member
and from random policies. Every reported value is attained by a verified
member of the equilibrium set; the ``guarantee`` tag says what the minimum
is taken over.
"""

from __future__ import annotations

import datetime as _dt
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import extract_policy, leader_return, leader_return_batch
from .equilibrium import (MEMBER_SLACK, VALUE_TIE, CandidatePool, CapExceeded,
                          DeterministicPolicies, EquilibriumCandidate, MeshPolicies,
                          check_epsilon_ne, evaluate_policies)
from .model import StackelbergModel

MODES = ("pessimistic", "optimistic")
STRATEGIES = ("enumerate", "mesh", "local")
DEFAULT_PENALTIES = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8)


class SolverResolutionError(RuntimeError):
    """No verified equilibrium was found with the chosen strategy."""


class SNEVerificationError(RuntimeError):
    """An extracted Stackelberg equilibrium failed re-verification."""


@dataclass(frozen=True)
class Strategy:
    name: str = "mesh"
    h: float = 1.0 / 64
    starts: int = 8
    penalties: tuple = DEFAULT_PENALTIES
    seed: int = 0
    threads: int = 1
    cap: int | None = None
    seed_h: float = 1.0 / 8
    max_sweeps: int = 400
    min_step: float = 1e-9

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.name!r}")
        if not 0 < self.h <= 1:
            raise ValueError(f"mesh spacing must be in (0, 1], got {self.h}")
        if self.starts < 1 or self.threads < 1:
            raise ValueError("starts and threads must be at least 1")
        if not self.penalties or min(self.penalties) <= 0:
            raise ValueError("penalty schedule must be a nonempty list of positive weights")

    def describe(self) -> dict:
        if self.name == "mesh":
            return {"name": "mesh", "h": self.h}
        if self.name == "enumerate":
            return {"name": "enumerate"}
        return {"name": "local", "starts": self.starts, "penalties": list(self.penalties),
                "seed": self.seed, "seed_h": self.seed_h}


@dataclass
class SolveReport:
    action: int
    action_name: str
    epsilon: float
    mode: str
    value: float
    witness: EquilibriumCandidate
    strategy: dict
    guarantee: str
    resolution: float
    evals: int
    seconds: float
    timestamp: str | None = None

    def to_json(self, timestamp: bool = True) -> dict:
        out = {"action": self.action, "action_name": self.action_name,
               "epsilon": self.epsilon, "mode": self.mode, "value": self.value,
               "witness": self.witness.to_json(), "strategy": self.strategy,
               "guarantee": self.guarantee, "resolution": self.resolution,
               "evals": self.evals, "seconds": self.seconds if timestamp else 0.0}
        if timestamp:
            out["timestamp"] = self.timestamp
        return out


@dataclass
class OuterResult:
    action: int
    action_name: str
    value: float
    epsilon: float
    mode: str
    reports: list = field(default_factory=list)

    @property
    def resolution(self) -> float:
        return max((r.resolution for r in self.reports), default=0.0)

    def to_json(self, timestamp: bool = True) -> dict:
        return {"action": self.action, "action_name": self.action_name, "value": self.value,
                "epsilon": self.epsilon, "mode": self.mode, "resolution": self.resolution,
                "reports": [r.to_json(timestamp) for r in self.reports]}


@dataclass
class SNE:
    policy: np.ndarray
    flow: np.ndarray
    action: int
    value: float
    epsilon: float
    epsilon_prime: float

    def to_json(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.tolist()
        d["flow"] = self.flow.tolist()
        return d


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sign(mode: str) -> float:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return 1.0 if mode == "pessimistic" else -1.0


def build_pool(model: StackelbergModel, a: int, strategy: Strategy) -> CandidatePool:
    """Candidate pool for a pool-based strategy (enumerate or mesh)."""
    if strategy.name == "enumerate":
        source = DeterministicPolicies(model, strategy.cap)
    elif strategy.name == "mesh":
        source = MeshPolicies(model, a, strategy.h, strategy.cap)
    else:
        raise ValueError("local search has no fixed candidate pool")
    return CandidatePool(model, a, source, threads=strategy.threads)


def _seed_pool(model: StackelbergModel, a: int, strategy: Strategy) -> CandidatePool | None:
    for make in (lambda: MeshPolicies(model, a, strategy.seed_h, strategy.cap),
                 lambda: DeterministicPolicies(model, strategy.cap)):
        try:
            return CandidatePool(model, a, make(), threads=strategy.threads)
        except CapExceeded:
            continue
    return None


def report_from_pool(model: StackelbergModel, a: int, epsilon: float, mode: str,
                     pool: CandidatePool, strategy: Strategy, seconds: float = 0.0,
                     evals: int | None = None) -> SolveReport:
    index = pool.best_index(epsilon, mode)
    if index is None:
        raise SolverResolutionError(
            f"no {epsilon:g}-equilibrium among {pool.size} candidates for action "
            f"{model.leader_actions[a]!r}; refine the mesh or use local search")
    cand = pool.candidate(index)
    return SolveReport(action=a, action_name=model.leader_actions[a], epsilon=float(epsilon),
                       mode=mode, value=float(pool.leader_value[index]), witness=cand,
                       strategy=strategy.describe(), guarantee=pool.source.guarantee,
                       resolution=pool.resolution(),
                       evals=pool.evals if evals is None else evals,
                       seconds=seconds, timestamp=_now())


# -- local refinement -------------------------------------------------------------

class _Tracker:
    """Keeps the best verified member seen across all evaluations."""

    def __init__(self, epsilon: float, sign: float):
        self.epsilon, self.sign = epsilon, sign
        self.key = np.inf
        self.policy = None
        self.evals = 0

    def offer(self, policies, expl, values):
        self.evals += len(policies)
        ok = expl <= self.epsilon + MEMBER_SLACK
        if ok.any():
            keys = np.where(ok, self.sign * values, np.inf)
            j = int(np.argmin(keys))
            if keys[j] < self.key - VALUE_TIE:
                self.key, self.policy = float(keys[j]), policies[j].copy()


def _moves(policy: np.ndarray, step: float):
    """All single transfers of ``step`` mass between two actions of one row."""
    T1, S, A = policy.shape
    out = []
    for t in range(T1):
        for s in range(S):
            for x in range(A):
                if policy[t, s, x] <= 0:
                    continue
                d = min(step, policy[t, s, x])
                for y in range(A):
                    if y != x:
                        p = policy.copy()
                        p[t, s, x] -= d
                        p[t, s, y] += d
                        out.append(p)
    return np.array(out) if out else np.empty((0,) + policy.shape)


def _refine(model, a, epsilon, sign, start, strategy, tracker):
    def evaluate(batch):
        flows, expl = evaluate_policies(model, a, batch)
        values = leader_return_batch(model, a, flows)
        tracker.offer(batch, expl, values)
        return expl, values

    policy = start.copy()
    for rho in strategy.penalties:
        def objective(expl, values):
            return sign * values + rho * np.maximum(0.0, expl - epsilon) ** 2

        expl, values = evaluate(policy[None])
        current = float(objective(expl, values)[0])
        step = 0.25
        for _ in range(strategy.max_sweeps):
            batch = _moves(policy, step)
            if len(batch) == 0:
                break
            f = objective(*evaluate(batch))
            j = int(np.argmin(f))
            if f[j] < current - 1e-15:
                policy, current = batch[j], float(f[j])
            else:
                step /= 2
                if step < strategy.min_step:
                    break
        expl, _ = evaluate(policy[None])
        if expl[0] - epsilon <= 1e-8:
            break
    return policy


def _local_search(model, a, epsilon, mode, strategy):
    sign = _sign(mode)
    rng = np.random.default_rng(strategy.seed)
    shape = (model.T + 1, model.S, model.A)
    starts = []
    seed_pool = _seed_pool(model, a, strategy)
    evals = 0
    resolution = 0.0
    if seed_pool is not None:
        evals += seed_pool.evals
        resolution = seed_pool.resolution()
        idx = seed_pool.best_index(epsilon, mode)
        if idx is not None:
            starts.append(seed_pool.source.policies_at([idx])[0])
    while len(starts) < strategy.starts:
        starts.append(rng.dirichlet(np.ones(model.A), size=shape[:2]))

    def run(start):
        tracker = _Tracker(epsilon, sign)
        _refine(model, a, epsilon, sign, start, strategy, tracker)
        return tracker

    if strategy.threads > 1:
        with ThreadPoolExecutor(max_workers=strategy.threads) as ex:
            trackers = list(ex.map(run, starts))
    else:
        trackers = [run(s) for s in starts]
    evals += sum(t.evals for t in trackers)
    found = [t for t in trackers if t.policy is not None]
    if not found:
        raise SolverResolutionError(
            f"local search found no {epsilon:g}-equilibrium for action "
            f"{model.leader_actions[a]!r} from {len(starts)} starts")
    best_key = min(t.key for t in found)
    tied = [t for t in found if t.key <= best_key + VALUE_TIE]
    flows, _ = evaluate_policies(model, a, np.array([t.policy for t in tied]))
    j = int(np.lexsort(flows.reshape(len(tied), -1).T[::-1])[0])
    return tied[j].policy, evals, resolution


def inner_worst_case(model: StackelbergModel, leader_action, epsilon: float,
                     strategy: Strategy | None = None, mode: str = "pessimistic",
                     pool: CandidatePool | None = None) -> SolveReport:
    """Worst (or, in optimistic mode, best) leader return over epsilon-equilibria."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    strategy = strategy or Strategy()
    _sign(mode)
    a = model.action_index(leader_action)
    t0 = time.perf_counter()
    if strategy.name == "local":
        policy, evals, resolution = _local_search(model, a, epsilon, mode, strategy)
        flows, expl = evaluate_policies(model, a, policy[None])
        cand = check_epsilon_ne(model, a, policy, flows[0], epsilon)
        if not cand.is_member(epsilon):
            raise SolverResolutionError("local search witness failed re-verification")
        return SolveReport(action=a, action_name=model.leader_actions[a],
                           epsilon=float(epsilon), mode=mode,
                           value=leader_return(model, a, cand.flow), witness=cand,
                           strategy=strategy.describe(), guarantee="local",
                           resolution=resolution, evals=evals,
                           seconds=time.perf_counter() - t0, timestamp=_now())
    if pool is None:
        pool = build_pool(model, a, strategy)
    rep = report_from_pool(model, a, epsilon, mode, pool, strategy)
    rep.seconds = time.perf_counter() - t0
    return rep


def outer_maximize(model: StackelbergModel, epsilon: float, strategy: Strategy | None = None,
                   mode: str = "pessimistic", pools: dict | None = None) -> OuterResult:
    """Best leader action; ties go to the lowest action index."""
    strategy = strategy or Strategy()
    pools = pools or {}
    actions = range(model.dims.n_leader_actions)

    def solve(a):
        return inner_worst_case(model, a, epsilon, strategy, mode, pools.get(a))

    if strategy.threads > 1 and len(actions) > 1:
        with ThreadPoolExecutor(max_workers=strategy.threads) as ex:
            reports = list(ex.map(solve, actions))
    else:
        reports = [solve(a) for a in actions]
    best = 0
    for r in reports[1:]:
        if r.value > reports[best].value + VALUE_TIE:
            best = r.action
    return OuterResult(action=best, action_name=model.leader_actions[best],
                       value=reports[best].value, epsilon=float(epsilon), mode=mode,
                       reports=reports)


def extract_sne(outer: OuterResult, model: StackelbergModel,
                epsilon_prime: float | None = None) -> SNE:
    """Re-verify both equilibrium conditions and return (policy, flow, action)."""
    eps_p = outer.resolution if epsilon_prime is None else float(epsilon_prime)
    rep = outer.reports[outer.action]
    flow = rep.witness.flow
    policy = extract_policy(flow)
    cand = check_epsilon_ne(model, outer.action, policy, flow, outer.epsilon)
    if not cand.is_member(outer.epsilon):
        raise SNEVerificationError(
            f"witness for {outer.action_name!r} is not an {outer.epsilon:g}-equilibrium "
            f"(exploitability {cand.exploitability:.3g}, consistent={cand.consistent})")
    value = leader_return(model, outer.action, flow)
    if abs(value - rep.value) > 1e-10:
        raise SNEVerificationError(f"witness return {value} differs from reported {rep.value}")
    best = max(r.value for r in outer.reports)
    if value < best - eps_p - 1e-12:
        raise SNEVerificationError(f"action {outer.action_name!r} is not {eps_p:g}-optimal")
    return SNE(policy=policy, flow=flow, action=outer.action, value=value,
               epsilon=outer.epsilon, epsilon_prime=eps_p)
