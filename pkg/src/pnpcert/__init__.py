"""Plug-and-play proximal gradient descent with analytic MMSE denoisers and
instance-level certification of its convergence bounds."""

from pnpcert.denoisers import (
    BiasModel,
    Denoiser,
    LinearDenoiser,
    MismatchedDenoiser,
    MmseDenoiser,
    RelaxedDenoiser,
    perturb,
    relax,
)
from pnpcert.equivariance import EquivariantDenoiser, bias_decompose, check_equivariance, wrap_equivariant
from pnpcert.fidelity import LeastSquares, Welsch
from pnpcert.groups import GroupAction, check_invariance, make_group
from pnpcert.priors import GmmPrior
from pnpcert.solver import ProblemSpec, SolverTrace, epnp_pgd_run, pgd_exact_run, pnp_pgd_run

__version__ = "0.1.0"

__all__ = [
    "BiasModel", "Denoiser", "LinearDenoiser", "MismatchedDenoiser", "MmseDenoiser", "RelaxedDenoiser",
    "perturb", "relax", "EquivariantDenoiser", "bias_decompose", "check_equivariance", "wrap_equivariant",
    "LeastSquares", "Welsch", "GroupAction", "check_invariance", "make_group", "GmmPrior",
    "ProblemSpec", "SolverTrace", "epnp_pgd_run", "pgd_exact_run", "pnp_pgd_run",
]
