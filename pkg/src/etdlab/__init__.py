"""Emphatic TD(lambda) laboratory for finite MDPs."""

from .analysis import (BellmanOperators, SolutionReport, SubspaceReport, analyze,
                       emphasis_weights, integrate_mean_ode, linear_system, multistep_bellman,
                       solve_theta_star, subspace_analysis, value_function)
from .estimators import ELSTD, EmphaticTD, ExactTD
from .etd import (AlgoConfig, AlgState, StepSchedule, Trajectory, TruncatedTrace, Variant,
                  h_eval, m_of, project_ball, psi_clip, simulate, stepsize_at, theta_step,
                  trace_step)
from .exceptions import (ConfigParse, EmptyEmphasis, EtdLabError, Inconsistent, MissingRuns,
                         ModelError, NonFinite, NonIrreducible, SingularSystem,
                         UnreachableAction, WindowOutOfRange)
from .experiment import (EnsembleStats, ExperimentPlan, averaged_deviation, coupling_check,
                         elstd_estimate, hbar_estimate, kappa_estimate, occupation_fraction,
                         run_ensemble, run_trajectory, segment_violation_prob,
                         truncation_error_curve, ui_diagnostic)
from .mdp import (AssumptionReport, MdpModel, PolicyPair, builtin, importance_ratio,
                  load_model, make_rng, policy_matrices, sample_step, stationary_distribution,
                  validate_assumptions)

__version__ = "0.1.0"
