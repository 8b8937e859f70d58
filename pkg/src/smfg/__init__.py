"""Stackelberg mean-field games with a finite horizon and finite state spaces."""

from .model import (Dimensions, LipschitzEstimate, ModelError, StackelbergModel,
                    estimate_lipschitz, eval_leader_transition, eval_transition,
                    load_model, majority_model, model_from_config, predator_model,
                    random_affine_model)
from .dynamics import (consistency_residual, extract_policy, follower_return, leader_return,
                       propagate_follower_flow, propagate_leader_marginals)
from .mdp import (KKTCertificate, LPData, ValueTable, assemble_lp, backward_induction_value,
                  exploitability, kkt_certificate_from_dp, verify_kkt)
from .equilibrium import (EquilibriumCandidate, check_epsilon_ne,
                          enumerate_deterministic_candidates, mesh_candidates)
from .solver import (SNE, OuterResult, SolveReport, SolverResolutionError, Strategy,
                     extract_sne, inner_worst_case, outer_maximize)
from .sensitivity import (BoundCheckReport, InadmissibleError, PerturbationSpec,
                          check_flow_deviation, check_theorem_sandwich, check_value_deviation,
                          epsilon_sweep, perturb_model, relaxed_action_experiment)

__version__ = "0.1.0"
