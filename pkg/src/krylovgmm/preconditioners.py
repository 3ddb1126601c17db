"""Preconditioners for ``M = Sigma^{-1} + Z^T W Z``.

Every preconditioner ``P = S S^T`` exposes the same contract:

* ``solve(v)`` returns ``P^{-1} v`` (vector or column block),
* ``logdet`` is ``log det(P)``,
* ``sample(eps)`` maps standard normal draws of length ``sample_dim`` to
  ``N(0, P)`` draws of length ``dim``,
* ``half_inv(v)`` applies ``S^{-1}``, so ``S^{-1} M S^{-T}`` is the
  symmetric preconditioned matrix.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.typing import NDArray

from krylovgmm import _kernels
from krylovgmm.sparse_core import NormalMatrix, _tri_apply

__all__ = [
    "Preconditioner",
    "SSORPreconditioner",
    "ZICPreconditioner",
    "DiagonalPreconditioner",
    "LowRankPreconditioner",
    "IdentityPreconditioner",
    "ZICBreakdown",
    "build_ssor",
    "build_zic",
    "build_diagonal",
    "build_lowrank",
    "build_identity",
    "build_preconditioner",
    "pivoted_cholesky",
    "PRECONDITIONER_KINDS",
]

PRECONDITIONER_KINDS = ("ssor", "zic", "diagonal", "pivchol", "lanczos", "none")


class ZICBreakdown(ArithmeticError):
    """Incomplete Cholesky hit a nonpositive pivot; callers may fall back to SSOR."""

    def __init__(self, row: int, pivot: float):
        super().__init__(f"incomplete Cholesky breakdown at row {row} (pivot {pivot:.3e})")
        self.row = row
        self.pivot = pivot


class Preconditioner:
    """Base class; subclasses implement the solve / logdet / sample contract."""

    kind: str = "base"
    dim: int

    @property
    def sample_dim(self) -> int:
        return self.dim

    def solve(self, v: NDArray) -> NDArray:
        raise NotImplementedError

    @property
    def logdet(self) -> float:
        raise NotImplementedError

    def sample(self, eps: NDArray) -> NDArray:
        raise NotImplementedError

    def half_inv(self, v: NDArray) -> NDArray:
        """Apply ``S^{-1}`` where ``P = S S^T``; default uses a dense Cholesky factor."""
        return sla.solve_triangular(self._dense_chol, v, lower=True)

    @cached_property
    def _dense_chol(self) -> NDArray:
        return np.linalg.cholesky(self.dense())

    def dense(self) -> NDArray:
        """Dense ``P`` (small instances only)."""
        return self.sample_matrix_dense() @ self.sample_matrix_dense().T

    def sample_matrix_dense(self) -> NDArray:
        """Dense ``S`` with ``P = S S^T`` (``dim x sample_dim``)."""
        return self.sample(np.eye(self.sample_dim))


class SSORPreconditioner(Preconditioner):
    """``P = (L + D) D^{-1} (L + D)^T`` built from the triangular split of ``M``."""

    kind = "ssor"

    def __init__(self, M: NormalMatrix):
        if np.any(M.diag <= 0):
            raise ValueError("SSOR needs a strictly positive diagonal")
        self.M = M
        self.dim = M.dim
        self.diag = M.diag
        self._sqrt_d = np.sqrt(M.diag)

    def solve(self, v):
        a = self.M.lower_solve(v)
        return self.M.upper_solve(_scale_rows(a, self.diag))

    @property
    def logdet(self) -> float:
        return float(np.log(self.diag).sum())

    def sample(self, eps):
        return self.M.tril @ _scale_rows(eps, 1.0 / self._sqrt_d)

    def half_inv(self, v):
        return _scale_rows(self.M.lower_solve(v), self._sqrt_d)

    def lower_inv(self, v):
        """``(L + D)^{-1} v``."""
        return self.M.lower_solve(v)

    def lower_inv_from_eps(self, eps):
        """``(L + D)^{-1} z`` for ``z = sample(eps)``, without a triangular solve."""
        return _scale_rows(eps, 1.0 / self._sqrt_d)

    def solve_from_eps(self, eps):
        """``P^{-1} z`` for ``z = sample(eps)`` using one triangular solve."""
        return self.M.upper_solve(_scale_rows(eps, self._sqrt_d))

    def dense(self):
        B = self.M.tril.toarray()
        return (B / self.diag) @ B.T


class ZICPreconditioner(Preconditioner):
    """``P = L L^T`` with ``L`` the zero fill-in incomplete Cholesky factor of ``M``."""

    kind = "zic"

    def __init__(self, M: NormalMatrix):
        tril = M.tril
        vals, bad, piv = _kernels.zic_factor(tril.indptr, tril.indices, tril.data)
        if bad >= 0:
            raise ZICBreakdown(int(bad), float(piv))
        self.dim = M.dim
        self.factor = sp.csr_matrix((vals, tril.indices.copy(), tril.indptr.copy()), shape=tril.shape)
        self.factor_t = self.factor.T.tocsr()
        self.factor_t.sort_indices()
        self._diag = self.factor.diagonal()

    def solve(self, v):
        a = _tri_apply(_kernels.lower_solve, self.factor, v)
        return _tri_apply(_kernels.upper_solve, self.factor_t, a)

    @property
    def logdet(self) -> float:
        return float(2.0 * np.log(self._diag).sum())

    def sample(self, eps):
        return self.factor @ np.asarray(eps, dtype=float)

    def half_inv(self, v):
        return _tri_apply(_kernels.lower_solve, self.factor, v)

    def dense(self):
        L = self.factor.toarray()
        return L @ L.T


class DiagonalPreconditioner(Preconditioner):
    """``P = diag(M)``."""

    kind = "diagonal"

    def __init__(self, diag: NDArray):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag <= 0):
            raise ValueError("diagonal preconditioner needs a positive diagonal")
        self.dim = diag.size
        self.diag = diag
        self._sqrt_d = np.sqrt(diag)

    def solve(self, v):
        return _scale_rows(v, 1.0 / self.diag)

    @property
    def logdet(self) -> float:
        return float(np.log(self.diag).sum())

    def sample(self, eps):
        return _scale_rows(eps, self._sqrt_d)

    def half_inv(self, v):
        return _scale_rows(v, 1.0 / self._sqrt_d)

    def dense(self):
        return np.diag(self.diag)


class IdentityPreconditioner(Preconditioner):
    """No preconditioning, ``P = I``."""

    kind = "none"

    def __init__(self, dim: int):
        self.dim = int(dim)

    def solve(self, v):
        return np.array(v, dtype=float, copy=True)

    @property
    def logdet(self) -> float:
        return 0.0

    def sample(self, eps):
        return np.array(eps, dtype=float, copy=True)

    def half_inv(self, v):
        return np.array(v, dtype=float, copy=True)

    def dense(self):
        return np.eye(self.dim)


class LowRankPreconditioner(Preconditioner):
    """``P = Sigma^{-1} + L_k L_k^T`` applied through Woodbury and the determinant lemma."""

    def __init__(self, sigma_inv: NDArray, Lk: NDArray, kind: str = "pivchol"):
        self.kind = kind
        self.sigma_inv = np.asarray(sigma_inv, dtype=float)
        self.Lk = np.asarray(Lk, dtype=float).reshape(self.sigma_inv.size, -1)
        self.dim = self.sigma_inv.size
        self.rank = self.Lk.shape[1]
        self._sigma = 1.0 / self.sigma_inv
        SL = self.Lk * self._sigma[:, None]
        self._SL = SL
        # capacitance I + L^T Sigma L
        cap = np.eye(self.rank) + self.Lk.T @ SL
        self._cap_chol = sla.cho_factor(cap, lower=True) if self.rank else None
        self._logdet_cap = float(2 * np.log(np.diag(self._cap_chol[0])).sum()) if self.rank else 0.0

    @property
    def sample_dim(self) -> int:
        return self.dim + self.rank

    def solve(self, v):
        v = np.asarray(v, dtype=float)
        out = _scale_rows(v, self._sigma)
        if self.rank:
            out = out - self._SL @ sla.cho_solve(self._cap_chol, self._SL.T @ v)
        return out

    @property
    def logdet(self) -> float:
        return float(np.log(self.sigma_inv).sum() + self._logdet_cap)

    def sample(self, eps):
        eps = np.asarray(eps, dtype=float)
        out = _scale_rows(eps[: self.dim], np.sqrt(self.sigma_inv))
        if self.rank:
            out = out + self.Lk @ eps[self.dim:]
        return out

    def dense(self):
        return np.diag(self.sigma_inv) + self.Lk @ self.Lk.T


def _scale_rows(v, s):
    v = np.asarray(v, dtype=float)
    return v * s if v.ndim == 1 else v * s[:, None]


def build_ssor(M: NormalMatrix) -> SSORPreconditioner:
    return SSORPreconditioner(M)


def build_zic(M: NormalMatrix) -> ZICPreconditioner:
    """Zero fill-in incomplete Cholesky; raises :class:`ZICBreakdown` on a bad pivot."""
    return ZICPreconditioner(M)


def build_diagonal(M: NormalMatrix) -> DiagonalPreconditioner:
    return DiagonalPreconditioner(M.diag)


def build_identity(M: NormalMatrix) -> IdentityPreconditioner:
    return IdentityPreconditioner(M.dim)


def pivoted_cholesky(A: sp.spmatrix, k: int, rel_tol: float = 1e-12) -> NDArray:
    """Rank-``k`` pivoted Cholesky factor ``L`` with ``A ~ L L^T``.

    Stops early (returning fewer columns) once the largest remaining
    diagonal of the residual drops below ``rel_tol`` times the largest
    diagonal of ``A``.
    """
    A = sp.csc_matrix(A)
    m = A.shape[0]
    k = min(int(k), m)
    d = A.diagonal().astype(float).copy()
    scale = d.max() if m else 0.0
    L = np.zeros((m, k))
    for j in range(k):
        i = int(np.argmax(d))
        if d[i] <= rel_tol * scale or d[i] <= 0:
            return L[:, :j]
        col = A[:, i].toarray().ravel() - L[:, :j] @ L[i, :j]
        L[:, j] = col / np.sqrt(d[i])
        d -= L[:, j] ** 2
        d[i] = 0.0
    return L


def build_lowrank(M: NormalMatrix, kind: str = "pivchol", k: int = 50, seed: int = 0) -> LowRankPreconditioner:
    """Low-rank preconditioner ``Sigma^{-1} + L_k L_k^T`` approximating ``Z^T W Z``.

    Parameters
    ----------
    M : NormalMatrix
        Supplies ``Z^T W Z`` (matvecs and, for pivoted Cholesky, its diagonal
        and columns) and ``Sigma^{-1}``.
    kind : {"pivchol", "lanczos"}
        Pivoted Cholesky or partial Lanczos on ``Z^T W Z``.
    k : int
        Target rank; ``k = 0`` gives ``P = Sigma^{-1}``.
    seed : int
        Start-vector seed for the Lanczos variant.
    """
    if k < 0 or k > M.dim:
        raise ValueError(f"rank must lie in [0, {M.dim}], got {k}")
    A = M.ztwz
    if k == 0:
        Lk = np.zeros((M.dim, 0))
    elif kind == "pivchol":
        Lk = pivoted_cholesky(A, k)
    elif kind == "lanczos":
        from krylovgmm.krylov import lanczos_partial

        q0 = np.random.default_rng(seed).standard_normal(M.dim)
        Q, T = lanczos_partial(lambda x: A @ x, q0, k)
        lam, V = np.linalg.eigh(T)
        Lk = (Q @ V) * np.sqrt(np.clip(lam, 0.0, None))
    else:
        raise ValueError(f"unknown low-rank kind {kind!r}")
    return LowRankPreconditioner(M.sigma_inv, Lk, kind=kind)


def build_preconditioner(kind: str, M: NormalMatrix, rank: int = 50, seed: int = 0) -> Preconditioner:
    """Dispatch on ``kind`` (one of ``PRECONDITIONER_KINDS``)."""
    kind = kind.lower()
    if kind == "ssor":
        return build_ssor(M)
    if kind == "zic":
        return build_zic(M)
    if kind == "diagonal":
        return build_diagonal(M)
    if kind in ("pivchol", "lanczos"):
        return build_lowrank(M, kind, min(rank, M.dim), seed)
    if kind == "none":
        return build_identity(M)
    raise ValueError(f"unknown preconditioner {kind!r}; choose from {PRECONDITIONER_KINDS}")
