"""Boundary stabilization of a nonlocal heat equation under input delay.

The package is organised bottom-up: :mod:`spectral` solves the eigenproblem
and builds the Riesz basis, :mod:`design` assembles the proportional feedback,
:mod:`delay` implements the predictor (Neumann series) layer and
:mod:`pdesim` closes the loop on a finite-difference model of the PDE.
"""

from .errors import (
    BasisInconsistencyError,
    BlowUpError,
    ConfigError,
    IllConditionedBasisError,
    RankConditionError,
    SolverFailure,
)
from .spectral import BasisPair, Spectrum, build_basis, choose_unstable_dim, eigenvalues, solve_beta
from .design import DesignSet, build_design, build_lambda, feedback_u, kalman_rank
from .delay import ControlHistory, DelayOperator, apply_T_tau, mat_exp, neumann_U
from .pdesim import SimConfig, Trajectory, run_closed_loop, run_modal_ode

__version__ = "0.1.0"
