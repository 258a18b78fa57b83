"""Adaptive-sampling finite-difference quasi-Newton methods for noisy zero-order problems."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .lbfgs import LbfgsMemory, apply_h, apply_h_squared, try_update
from .linesearch import LineSearchConfig, backtrack, fd_parameter, initial_steplength
from .oracle import Batch, CrnOracle, CrnSample, EvalCounter, GradientEstimate
from .problems import Problem, chebyquad, make_problem, quadratic, solve_reference, true_objective
from .sampling import SampleSizePolicy, ipqn_test, next_batch, norm_test
from .solver import RunResult, SolverConfig, run, run_adaptive, run_fd_sg, tune_fd_sg

__all__ = [
    "Batch",
    "CrnOracle",
    "CrnSample",
    "EvalCounter",
    "GradientEstimate",
    "LbfgsMemory",
    "LineSearchConfig",
    "Problem",
    "RunResult",
    "SampleSizePolicy",
    "SolverConfig",
    "apply_h",
    "apply_h_squared",
    "backtrack",
    "chebyquad",
    "fd_parameter",
    "initial_steplength",
    "ipqn_test",
    "make_problem",
    "next_batch",
    "norm_test",
    "quadratic",
    "run",
    "run_adaptive",
    "run_fd_sg",
    "solve_reference",
    "true_objective",
    "try_update",
    "tune_fd_sg",
]
