"""Risk-sensitive discounted CTMDPs: HJB fixed-point solver, policy extraction and Monte Carlo."""

from .config import load_config
from .estimator import HJBSolver
from .hjb import (
    PolicyField,
    ThetaGrid,
    ValueField,
    apply_T,
    contraction_bound,
    extract_policy,
    residual,
    solve_hjb,
    solve_truncated,
)
from .lyapunov import LyapunovCertificate, certify_gaussian, check_certificate, value_upper_bound
from .model import (
    ActionSet,
    CTMDPModel,
    IntensityJump,
    RateMatrix,
    StateSpace,
    build_gaussian_model,
    truncate,
    validate_kernel,
)
from .simulate import MarkovControl, estimate_J, estimate_truncated_functional, sample_trajectory
from .verify import crosscheck_feynman_kac, oracle_fixed_policy, run_analytic_suite

__version__ = "0.1.0"

__all__ = [
    "load_config",
    "HJBSolver",
    "PolicyField",
    "ThetaGrid",
    "ValueField",
    "apply_T",
    "contraction_bound",
    "extract_policy",
    "residual",
    "solve_hjb",
    "solve_truncated",
    "LyapunovCertificate",
    "certify_gaussian",
    "check_certificate",
    "value_upper_bound",
    "ActionSet",
    "CTMDPModel",
    "IntensityJump",
    "RateMatrix",
    "StateSpace",
    "build_gaussian_model",
    "truncate",
    "validate_kernel",
    "MarkovControl",
    "estimate_J",
    "estimate_truncated_functional",
    "sample_trajectory",
    "crosscheck_feynman_kac",
    "oracle_fixed_policy",
    "run_analytic_suite",
]
