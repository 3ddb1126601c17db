"""Exact dense-Cholesky reference for everything the Krylov path approximates.

Intended for desk-scale problems (``m`` up to a configurable cap); the
point is auditability, not speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from krylovgmm.sparse_core import IncidenceMatrix, NormalMatrix

__all__ = [
    "DenseFactor",
    "OracleCapExceeded",
    "DEFAULT_CAP",
    "chol_nll",
    "chol_predict",
    "chol_fisher",
    "naive_gaussian_nll",
    "naive_predictive_cov",
]

DEFAULT_CAP = 5000


class OracleCapExceeded(ValueError):
    """Dimension too large for a dense factorization."""


@dataclass
class DenseFactor:
    """Dense lower Cholesky factor of an SPD matrix."""

    lower: NDArray

    @classmethod
    def of(cls, A, cap: int = DEFAULT_CAP) -> "DenseFactor":
        dense = A.dense() if isinstance(A, NormalMatrix) else np.asarray(A.toarray() if hasattr(A, "toarray") else A)
        if dense.shape[0] > cap:
            raise OracleCapExceeded(f"dimension {dense.shape[0]} exceeds the dense oracle cap {cap}")
        return cls(np.linalg.cholesky(dense))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @cached_property
    def logdet(self) -> float:
        return float(2.0 * np.log(np.diag(self.lower)).sum())

    def solve(self, V: NDArray) -> NDArray:
        return sla.cho_solve((self.lower, True), np.asarray(V, dtype=float))

    @cached_property
    def inverse(self) -> NDArray:
        return self.solve(np.eye(self.dim))

    def diag_inverse(self) -> NDArray:
        return np.diag(self.inverse).copy()

    def diag_zinvz(self, Z: IncidenceMatrix) -> NDArray:
        """``diag(Z A^{-1} Z^T)`` for an incidence matrix ``Z``."""
        inv = self.inverse
        cols = Z.cols
        out = np.zeros(Z.n_rows)
        for p in range(Z.K):
            for q in range(Z.K):
                out += inv[cols[:, p], cols[:, q]]
        return out


def chol_nll(data, params, need_grad: bool = True, cap: int = DEFAULT_CAP):
    """Exact negative log-(approximate) marginal likelihood and gradient."""
    from krylovgmm.inference import Backend, nll

    return nll(data, params, Backend(kind="cholesky", oracle_cap=cap), need_grad=need_grad)


def chol_predict(spec, fit, cap: int = DEFAULT_CAP):
    """Exact predictive means and variances ``diag(Z_pp Sigma_p Z_pp^T + Z_po M^{-1} Z_po^T)``."""
    from krylovgmm.prediction import predict

    return predict(spec, fit, method="cholesky", cap=cap)


def chol_fisher(data, params, include_error_variance: bool = False, cap: int = DEFAULT_CAP) -> NDArray:
    """Exact Fisher information ``0.5 tr(Psi^{-1} dPsi_k Psi^{-1} dPsi_l)`` of a Gaussian model.

    Everything is computed in the random-effects space: with
    ``G = Z^T W Z`` and ``W = w I``, ``Z^T Psi^{-1} Z = G - G M^{-1} G``.
    """
    from krylovgmm.inference import normal_matrix

    if params.likelihood != "gaussian":
        raise ValueError("Fisher information is available for Gaussian likelihoods only")
    M = normal_matrix(data, params, w=np.full(data.n, 1.0 / params.sigma2))
    F = DenseFactor.of(M, cap)
    Minv = F.inverse
    w = 1.0 / params.sigma2
    C = (data.Z.csr.T @ data.Z.csr).toarray()
    G = w * C
    A = G - G @ Minv @ G
    off = data.Z.offsets
    K = data.K
    q = K + 1 if include_error_variance else K
    out = np.zeros((q, q))
    for k in range(K):
        for l in range(K):
            blk = A[off[k]:off[k + 1], off[l]:off[l + 1]]
            out[k, l] = 0.5 * np.sum(blk * blk)
    if include_error_variance:
        CMC = C @ Minv @ C
        # Z^T Psi^{-2} Z and tr(Psi^{-2})
        B2 = w ** 2 * (C - 2 * w * CMC + w ** 2 * CMC @ Minv @ C)
        for k in range(K):
            sl = slice(off[k], off[k + 1])
            out[k, K] = out[K, k] = 0.5 * np.trace(B2[sl, sl])
        n = data.n
        MC = Minv @ C
        out[K, K] = 0.5 * w ** 2 * (n - 2 * w * np.trace(MC) + w ** 2 * np.sum(MC * MC.T))
    return out


def naive_gaussian_nll(data, params) -> float:
    """Gaussian negative log-likelihood from the dense ``n x n`` covariance (no Woodbury)."""
    Zd = data.Z.csr.toarray()
    sig = params.sigma_diag(data.Z.offsets)
    Psi = (Zd * sig) @ Zd.T + params.sigma2 * np.eye(data.n)
    r = data.y - data.X @ params.beta
    c = sla.cho_factor(Psi, lower=True)
    logdet = 2.0 * np.log(np.diag(c[0])).sum()
    return float(0.5 * data.n * np.log(2 * np.pi) + 0.5 * logdet + 0.5 * r @ sla.cho_solve(c, r))


def naive_predictive_cov(data, params, spec) -> tuple[NDArray, NDArray]:
    """Gaussian predictive mean and covariance from dense ``Psi`` (conditional-normal formulas)."""
    Zd = data.Z.csr.toarray()
    sig = params.sigma_diag(data.Z.offsets)
    Psi = (Zd * sig) @ Zd.T + params.sigma2 * np.eye(data.n)
    Zpo = spec.Z_po.toarray()
    Zpp = spec.Z_pp.toarray()
    cross = (Zpo * sig) @ Zd.T
    c = sla.cho_factor(Psi, lower=True)
    mean = spec.X @ params.beta + cross @ sla.cho_solve(c, data.y - data.X @ params.beta)
    cov = (Zpo * sig) @ Zpo.T + (Zpp * spec.sigma_p) @ Zpp.T - cross @ sla.cho_solve(c, cross.T)
    return mean, cov
