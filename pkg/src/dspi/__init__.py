"""Averaged and smoothed policy iteration for finite MDPs, with inequality certificates."""
from .errors import ConfigError, DomainError, DspiError, InternalConsistencyError, ShapeError
from .mdp import (
    TabularMdp,
    apply_bellman_optimality,
    apply_bellman_policy,
    apply_smoothed_bellman_optimality,
    apply_smoothed_bellman_policy,
    evaluate_policy_exact,
    load_mdp,
    optimal_q,
    save_mdp,
    value_of,
)
from .regularizers import ENTROPY, NEG_SQ_NORM, ZERO, Regularizer, get_regularizer, regularized_argmax
from .solvers import (
    StepsizeSchedule,
    alpha_from_beta,
    beta_from_alpha,
    check_npg_dspi_equivalence,
    run_dspi,
    run_dual_averaged_pi,
    run_npg,
    run_pda,
    run_pi,
    run_vi,
)
from .trace import SolverTrace

__version__ = "0.1.0"
