"""``smfg`` command line.

Exit codes: 0 success, 1 invalid input, 2 no equilibrium found with the
chosen strategy, 3 a bound or certificate check failed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .dynamics import consistency_residual, propagate_follower_flow, validate_policy
from .equilibrium import EquilibriumCandidate, check_epsilon_ne
from .io import dumps_csv, dumps_json, write_text_atomic
from .mdp import (CertificateError, assemble_lp, backward_induction_value,
                  kkt_certificate_from_dp, verify_kkt)
from .model import ModelError, load_model, majority_model, predator_model
from .sensitivity import (InadmissibleError, PerturbationError, PerturbationSpec,
                          check_flow_deviation, check_theorem_sandwich, check_value_deviation,
                          corollary_sweep, epsilon_sweep, gaps_nonincreasing, perturb_model,
                          relaxed_action_experiment)
from .solver import (SNEVerificationError, SolverResolutionError, Strategy, extract_sne,
                     inner_worst_case, outer_maximize)

OK, INVALID, UNSOLVED, VIOLATED = 0, 1, 2, 3


class Violation(Exception):
    """A check ran and failed; carries the report so it is still written."""

    def __init__(self, message, payload):
        super().__init__(message)
        self.payload = payload


# -- argument handling --------------------------------------------------------------

def _nonneg(text):
    x = float(text)
    if not math.isfinite(x) or x < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative number, got {text!r}")
    return x


def _positive_int(text):
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return n


def _mesh(text):
    h = float(text)
    if not 0 < h <= 1:
        raise argparse.ArgumentTypeError(f"mesh spacing must be in (0, 1], got {text!r}")
    return h


def _grid(text):
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            n = int(round((hi - lo) / step))
            pts = [round(lo + i * step, 12) for i in range(n + 1)]
        else:
            pts = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: use start:stop:step or a,b,c") \
            from exc
    if any(p < 0 for p in pts) or pts != sorted(pts):
        raise argparse.ArgumentTypeError(f"grid {text!r} must be sorted and nonnegative")
    return pts


def _common(p: argparse.ArgumentParser, model_required=True):
    p.add_argument("--model", required=model_required, help="model config (JSON)")
    p.add_argument("--action", default="0", help="leader action index or name")
    p.add_argument("--epsilon", type=_nonneg, default=0.0)
    p.add_argument("--epsilon-prime", type=_nonneg, default=0.0)
    p.add_argument("--strategy", choices=("enumerate", "mesh", "local"), default="mesh")
    p.add_argument("--mesh", type=_mesh, default=1.0 / 64, help="mesh spacing h (1/h integer)")
    p.add_argument("--starts", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("pessimistic", "optimistic"), default="pessimistic")
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv"), default=None)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--no-timestamp", action="store_true",
                   help="omit wall-clock fields so reruns are byte-identical")
    p.add_argument("--no-figures", action="store_true", help="skip figures next to --out")


def _perturbation_flags(p):
    p.add_argument("--delta-p", type=_nonneg, default=0.0)
    p.add_argument("--delta-r", type=_nonneg, default=0.0)
    p.add_argument("--perturbation", default="random-seeded",
                   choices=("random-seeded", "builtin-example2", "builtin-example3"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smfg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"smfg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="worst-case leader return for one action")
    _common(p)
    p = sub.add_parser("outer", help="best leader action and its equilibrium")
    _common(p)
    p = sub.add_parser("sweep", help="leader value over a tolerance grid")
    _common(p)
    p.add_argument("--grid", type=_grid, default=_grid("0:0.4:0.005"))
    p.add_argument("--all-actions", action="store_true",
                   help="sweep the outer value instead of --action")
    p.add_argument("--jump-tol", type=_nonneg, default=1e-2)
    p = sub.add_parser("perturb", help="deviation bounds under a perturbation")
    _common(p)
    _perturbation_flags(p)
    p.add_argument("--policy", help="policy JSON shared by both models (random if omitted)")
    p = sub.add_parser("relaxed", help="relaxed versus unrelaxed action choice")
    _common(p)
    _perturbation_flags(p)
    p.add_argument("--corollary-steps", type=int, default=6)
    p = sub.add_parser("certify", help="KKT certificate for a policy or a report witness")
    _common(p)
    p.add_argument("--policy", required=True, help="policy JSON or a solve report")
    p = sub.add_parser("reproduce", help="built-in worked examples")
    _common(p, model_required=False)
    p.add_argument("--example", required=True,
                   choices=("predator", "predator-perturbed", "two-action", "majority"))
    p.add_argument("--epsilon0", type=_nonneg, default=0.2)
    p.add_argument("--delta-r", type=_nonneg, default=None)
    return parser


def _strategy(args) -> Strategy:
    return Strategy(name=args.strategy, h=args.mesh, starts=args.starts, seed=args.seed,
                    threads=args.threads)


def _load(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ModelError(f"--model: cannot read {path}: {exc.strerror}") from exc
    return load_model(text)


def _read_json(path, flag):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ModelError(f"{flag}: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"{flag}: {path} is not valid JSON ({exc})") from exc


# -- subcommands ----------------------------------------------------------------------

def cmd_solve(args):
    model = _load(args.model)
    rep = inner_worst_case(model, model.action_index(_action(args.action)), args.epsilon,
                           _strategy(args), args.mode)
    data = rep.to_json(not args.no_timestamp)
    rows = [(rep.epsilon, rep.value, rep.action_name, rep.guarantee)]
    summary = (f"J = {rep.value:.7f} for action {rep.action_name} at eps={rep.epsilon:g} "
               f"({rep.guarantee}, {rep.evals} evals)")
    return data, rows, summary, {}


def cmd_outer(args):
    model = _load(args.model)
    res = outer_maximize(model, args.epsilon, _strategy(args), args.mode)
    data = res.to_json(not args.no_timestamp)
    sne = extract_sne(res, model)
    data["sne"] = sne.to_json()
    rows = [(res.epsilon, r.value, r.action_name, r.guarantee) for r in res.reports]
    return data, rows, f"V = {res.value:.7f}, a* = {res.action_name}", {}


def cmd_sweep(args):
    model = _load(args.model)
    action = None if args.all_actions else _action(args.action)
    sw = epsilon_sweep(model, args.grid, action, _strategy(args), args.mode, args.jump_tol)
    data = sw.to_json()
    jumps = ", ".join(f"{j.right_epsilon:g} ({j.left_value:.4f} -> {j.right_value:.4f})"
                      for j in sw.jumps) or "none"
    summary = f"{len(sw.epsilons)} points, monotone={sw.monotone}, jumps: {jumps}"

    def figures(base):
        from .plotting import plot_sweep
        return [plot_sweep(sw, base.with_suffix(".png"))]
    if not sw.monotone:
        raise Violation(summary, (data, sw.rows(), summary, {"figures": figures}))
    return data, sw.rows(), summary, {"figures": figures}


def _spec(args):
    return PerturbationSpec(args.delta_p, args.delta_r, args.perturbation, args.seed)


def cmd_perturb(args):
    model = _load(args.model)
    spec = _spec(args)
    pert = perturb_model(model, spec)
    a = model.action_index(_action(args.action))
    if args.policy:
        policy = validate_policy(model, _policy_from(_read_json(args.policy, "--policy")))
    else:
        rng = np.random.default_rng(args.seed)
        policy = rng.dirichlet(np.ones(model.A), size=(model.T + 1, model.S))
    rep = check_flow_deviation(model, pert, a, policy)
    rep.merge(check_value_deviation(model, pert, a, policy))
    if args.epsilon_prime > 0:
        rep.merge(check_theorem_sandwich(model, pert, a, args.epsilon, args.epsilon_prime,
                                         _strategy(args), mode=args.mode))
    data = {"perturbation": spec.to_json(), "action": model.leader_actions[a],
            "report": rep.to_json()}
    rows = [(r["t"], r["observed"], r["bound"], r["ratio"]) for r in rep.flow]
    summary = (f"flow ratio {rep.max_ratio('flow'):.4f}, value ratio "
               f"{rep.max_ratio('value'):.4f}, passed={rep.passed}")

    def figures(base):
        from .plotting import plot_bound_ratios
        return [plot_bound_ratios([rep], base.with_suffix(".png"))]
    extra = {"figures": figures, "csv_header": ("t", "observed", "bound", "ratio")}
    if not rep.passed:
        raise Violation(summary, (data, rows, summary, extra))
    return data, rows, summary, extra


def cmd_relaxed(args):
    model = _load(args.model)
    spec = _spec(args)
    pert = perturb_model(model, spec)
    strategy = _strategy(args)
    rep = relaxed_action_experiment(model, pert, args.epsilon, args.epsilon_prime, strategy,
                                    mode=args.mode)
    rows_c = corollary_sweep(model, spec, args.epsilon, args.epsilon_prime, strategy,
                             args.corollary_steps, args.mode) if args.corollary_steps else []
    rep.corollary = rows_c
    data = rep.to_json(not args.no_timestamp)
    data["corollary_gaps_nonincreasing"] = gaps_nonincreasing(rows_c)
    names = model.leader_actions
    summary = (f"V = {rep.true_value:.7f} (a* = {names[rep.true_action]}); relaxed picks "
               f"{names[rep.relaxed_action]} (gap {rep.relaxed_gap:.7f}); unrelaxed picks "
               f"{names[rep.unrelaxed_action]} (gap {rep.unrelaxed_gap:.7f})")
    rows = [(r["delta_p"], r["delta_r"], r["epsilon_prime"], r["relaxed_action"], r["gap"])
            for r in rows_c]

    def figures(base):
        from .plotting import plot_relaxed
        return [plot_relaxed(rows_c, base.with_suffix(".png"))] if rows_c else []
    return data, rows, summary, {
        "figures": figures,
        "csv_header": ("delta_p", "delta_r", "epsilon_prime", "relaxed_action", "gap")}


def _policy_from(obj):
    if isinstance(obj, dict):
        if "witness" in obj:
            return obj["witness"]["policy"]
        if "policy" in obj:
            return obj["policy"]
        raise ModelError("--policy: expected a policy array, {\"policy\": ...} or a report "
                         "with a witness")
    return obj


def cmd_certify(args):
    model = _load(args.model)
    obj = _read_json(args.policy, "--policy")
    from_report = isinstance(obj, dict) and "witness" in obj
    a = model.action_index(obj["action"] if from_report else _action(args.action))
    eps = float(obj["epsilon"]) if from_report else args.epsilon
    policy = validate_policy(model, _policy_from(obj))
    flow = np.asarray(obj["witness"]["flow"], float) if from_report \
        else propagate_follower_flow(model, a, policy)
    values = backward_induction_value(model, a, flow)
    lp = assemble_lp(model, a, flow)
    cert = kkt_certificate_from_dp(values, model, a, flow)
    kkt = verify_kkt(lp, cert, 1e-9)
    cand: EquilibriumCandidate = check_epsilon_ne(model, a, policy, flow, eps)
    member = cand.is_member(eps)
    data = {"action": model.leader_actions[a], "epsilon": eps,
            "follower_value": values.value, "exploitability": cand.exploitability,
            "consistency_residual": consistency_residual(model, a, policy, flow),
            "member": member, "kkt": kkt.to_json(),
            "lp_dims": {"rows": int(lp.A.shape[0]), "cols": int(lp.A.shape[1])},
            "certificate": cert.to_json()}
    if from_report:
        from .dynamics import leader_return
        data["reported_value"] = obj["value"]
        data["value_matches"] = abs(leader_return(model, a, flow) - obj["value"]) <= 1e-10
    res = kkt.to_json()
    rows = [(k, res[k], res["flags"][k]) for k in res["flags"]]
    summary = (f"KKT passed={kkt.passed} (max residual "
               f"{max(kkt.primal_residual, kkt.dual_residual, kkt.complementarity, kkt.value_gap):.2e}),"
               f" exploitability {cand.exploitability:.3g}, member at eps={eps:g}: {member}")
    extra = {"csv_header": ("check", "value", "passed")}
    ok = kkt.passed and member and data.get("value_matches", True)
    if not ok:
        raise Violation(summary, (data, rows, summary, extra))
    return data, rows, summary, extra


def _closed_form_predator(eps0, delta_r=0.0):
    def f(eps):
        if eps >= eps0:
            return 0.0 if delta_r == 0 else None
        x = 1 + eps0 + delta_r
        return 1 - (x - math.sqrt(x * x - 4 * eps)) / 2
    return f


def cmd_reproduce(args):
    ex, eps0 = args.example, args.epsilon0
    strategy = _strategy(args)
    if ex == "predator":
        model = predator_model(eps0)
        if args.strategy == "mesh" and args.mesh == 1.0 / 64:
            strategy = Strategy("mesh", h=1.0 / 1024, threads=args.threads)
        grid = _grid(f"0:{2 * eps0}:0.005")
        sw = epsilon_sweep(model, grid, 0, strategy, args.mode)
        ref = _closed_form_predator(eps0)
        rows = [(e, v, ref(e), g) for e, v, _, g in sw.rows()]
        data = sw.to_json()
        data["closed_form"] = [ref(e) for e in grid]
        jump = sw.jumps[0] if sw.jumps else None
        summary = (f"jump at eps={jump.right_epsilon:g}: {jump.left_value:.4f} -> "
                   f"{jump.right_value:.4f}" if jump else "no jump detected")

        def figures(base):
            from .plotting import plot_sweep
            return [plot_sweep(sw, base.with_suffix(".png"), ref)]
        return data, rows, summary, {"figures": figures,
                                     "csv_header": ("epsilon", "value", "closed_form",
                                                    "guarantee")}
    if ex == "predator-perturbed":
        model = predator_model(eps0)
        if args.strategy == "mesh" and args.mesh == 1.0 / 64:
            strategy = Strategy("mesh", h=1.0 / 1024, threads=args.threads)
        deltas = [args.delta_r] if args.delta_r is not None else [0.4, 0.2, 0.1, 0.05]
        rows = []
        for dr in deltas:
            pert = perturb_model(model, PerturbationSpec(0.0, dr, "builtin-example2"))
            rep = inner_worst_case(pert, 0, eps0, strategy, args.mode)
            x = 1 + eps0 + dr
            rows.append((dr, rep.value, 1 - (x - math.sqrt(x * x - 4 * eps0)) / 2))
        data = {"epsilon0": eps0, "epsilon": eps0, "limit": 1 - eps0,
                "rows": [{"delta_r": d, "value": v, "closed_form": c} for d, v, c in rows]}
        summary = "; ".join(f"delta_r={d:g}: {v:.4f} (closed form {c:.4f})" for d, v, c in rows)
        return data, rows, summary, {"csv_header": ("delta_r", "value", "closed_form")}
    if ex == "two-action":
        model = predator_model(eps0, two_action=True)
        dr = 0.1 if args.delta_r is None else args.delta_r
        eps = args.epsilon if args.epsilon > 0 else eps0
        eps_p = args.epsilon_prime if args.epsilon_prime > 0 else 4 * dr
        pert = perturb_model(model, PerturbationSpec(0.0, dr, "builtin-example3"))
        rep = relaxed_action_experiment(model, pert, eps, eps_p, strategy, mode=args.mode)
        names = model.leader_actions
        data = rep.to_json(not args.no_timestamp)
        rows = [(names[i], rep.true_values[i], rep.perturbed_unrelaxed[i],
                 rep.perturbed_relaxed[i]) for i in range(len(names))]
        summary = (f"V^l = {rep.true_value:.7f}, a* = {names[rep.true_action]}; unrelaxed "
                   f"perturbed argmax {names[rep.unrelaxed_action]} with true value "
                   f"{rep.unrelaxed_true_value:.7f} (gap {rep.unrelaxed_gap:.7f}); relaxed "
                   f"argmax {names[rep.relaxed_action]} (gap {rep.relaxed_gap:.7f})")
        return data, rows, summary, {"csv_header": ("action", "true", "perturbed",
                                                    "perturbed_relaxed")}
    # majority
    grid = [[1.0, 1.0], [0.5, 1.0], [1.0, 0.5], [0.75, 1.0]]
    model = majority_model(2, horizon=2, leader_action_grid=grid)
    checks = []
    for k in range(2):
        policy = np.zeros((model.T + 1, 2, 2))
        policy[..., k] = 1.0
        flow = propagate_follower_flow(model, 0, policy)
        checks.append(check_epsilon_ne(model, 0, policy, flow, 0.0).exploitability)
    strat = strategy if args.strategy != "mesh" else Strategy("enumerate", threads=args.threads)
    res = outer_maximize(model, 0.0, strat, args.mode)
    data = {"gather_exploitability": checks, "outer": res.to_json(not args.no_timestamp)}
    rows = [(0.0, r.value, r.action_name, r.guarantee) for r in res.reports]
    summary = (f"gather-at-k exploitability {max(checks):.2e}; V = {res.value:.7f} at "
               f"{res.action_name}")
    return data, rows, summary, {}


def _action(text):
    return int(text) if str(text).lstrip("-").isdigit() else text


COMMANDS = {"solve": cmd_solve, "outer": cmd_outer, "sweep": cmd_sweep,
            "perturb": cmd_perturb, "relaxed": cmd_relaxed, "certify": cmd_certify,
            "reproduce": cmd_reproduce}
DEFAULT_HEADER = ("epsilon", "value", "action", "guarantee")


def _emit(args, data, rows, summary, extra):
    fmt = args.format or ("csv" if args.command == "sweep" else "json")
    text = dumps_csv(extra.get("csv_header", DEFAULT_HEADER), rows) if fmt == "csv" \
        else dumps_json(data)
    if args.out:
        out = write_text_atomic(args.out, text)
        written = [str(out)]
        if "figures" in extra and not args.no_figures:
            written += [str(p) for p in extra["figures"](Path(args.out))]
        print(f"{summary} [wrote {', '.join(written)}]")
    else:
        sys.stdout.write(text)
        print(summary, file=sys.stderr)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return OK if exc.code == 0 else INVALID
    try:
        payload = COMMANDS[args.command](args)
    except Violation as v:
        _emit(args, *v.payload)
        return VIOLATED
    except (SolverResolutionError, SNEVerificationError) as exc:
        print(f"smfg {args.command}: could not solve: {exc}", file=sys.stderr)
        return UNSOLVED
    except CertificateError as exc:
        print(f"smfg {args.command}: {exc}", file=sys.stderr)
        return VIOLATED
    except (InadmissibleError, PerturbationError, ModelError, ValueError, KeyError,
            jsonschema.ValidationError) as exc:
        print(f"smfg {args.command}: invalid input: {exc}", file=sys.stderr)
        return INVALID
    _emit(args, *payload)
    return OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
