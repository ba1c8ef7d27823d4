"""Linear-quadratic stochastic control with partial information.

Riccati and BSDE solvers for the optimal feedback, an epsilon-perturbation
solvability test, weak closed-loop extraction and an exact tree oracle.
"""

from .bsde import BasisSpec, BsdeSolution, IllConditionedRegression, UnsupportedData, solve_bsde
from .linalg import mean_stderr, min_eigenvalue, pairwise_sum, pinv, symmetrize
from .model import (SCENARIOS, Coefficient, Diagnostic, ProblemSpec, TimeGrid, UnknownScenario,
                    builtin_scenario, validate_spec)
from .oracle import (NotConvex, TreeDepthError, TreeModel, build_tree, estimate_gamma, tree_adjoint_gradient,
                     tree_cost, tree_exact_optimal, tree_gradient, tree_perturbed_value, verify_expansion)
from .riccati import (BlowUp, MatrixPath, SingularBlock, check_uniform_positivity, gain_path, solve_lyapunov_pair,
                      solve_p1, solve_p2)
from .simulate import (FeedbackLaw, PathEnsemble, Trajectories, control_l2_norm, evaluate_cost, sample_ensemble,
                       simulate_filtered_state, simulate_full_state)
from .solvability import (AssumptionError, ConvergenceTable, LadderCaps, NotConverged, SolvabilityReport,
                          default_ladder, epsilon_ladder, extract_weak_closed_loop, perturbed_feedback, solve_psd,
                          riccati_value)

__all__ = ["BasisSpec", "BsdeSolution", "IllConditionedRegression", "UnsupportedData", "solve_bsde",
    "mean_stderr", "min_eigenvalue", "pairwise_sum", "pinv", "symmetrize", "SCENARIOS", "Coefficient",
    "Diagnostic", "ProblemSpec", "TimeGrid", "UnknownScenario", "builtin_scenario", "validate_spec",
    "NotConvex", "TreeDepthError", "TreeModel", "build_tree", "estimate_gamma", "tree_adjoint_gradient",
    "tree_cost", "tree_exact_optimal", "tree_gradient", "tree_perturbed_value", "verify_expansion", "BlowUp",
    "MatrixPath", "SingularBlock", "check_uniform_positivity", "gain_path", "solve_lyapunov_pair",
    "solve_p1", "solve_p2", "FeedbackLaw", "PathEnsemble", "Trajectories", "control_l2_norm",
    "evaluate_cost", "sample_ensemble", "simulate_filtered_state", "simulate_full_state", "AssumptionError",
    "ConvergenceTable", "LadderCaps", "NotConverged", "SolvabilityReport", "default_ladder",
    "epsilon_ladder", "extract_weak_closed_loop", "perturbed_feedback", "solve_psd", "riccati_value"]
__version__ = "0.1.0"
