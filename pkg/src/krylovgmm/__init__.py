"""Krylov subspace methods for mixed effects models with crossed random effects."""

from krylovgmm.inference import Backend, GroupedDesign, ModelParams, find_mode, nll
from krylovgmm.likelihoods import BernoulliLogit, GaussianLikelihood, eval_derivs
from krylovgmm.sparse_core import assemble_normal_matrix, build_incidence

__version__ = "0.1.0"

__all__ = [
    "Backend",
    "GroupedDesign",
    "ModelParams",
    "find_mode",
    "nll",
    "BernoulliLogit",
    "GaussianLikelihood",
    "eval_derivs",
    "assemble_normal_matrix",
    "build_incidence",
]
