"""Incidence matrices for grouped random effects and the sparse normal matrix.

The normal matrix is ``M = Sigma^{-1} + Z^T W Z`` where ``Z = (Z_1, ..., Z_K)``
is the binary incidence matrix built from K categorical grouping factors,
``W`` is a nonnegative diagonal and ``Sigma`` is the diagonal prior
covariance of the stacked random effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray

from krylovgmm import _kernels

__all__ = [
    "IncidenceMatrix",
    "REStructure",
    "NormalMatrix",
    "build_incidence",
    "assemble_normal_matrix",
    "matvec",
    "as_csr",
]


@dataclass(frozen=True)
class REStructure:
    """Level dictionaries of the grouping factors.

    ``levels[j]`` lists the raw labels of factor ``j`` in column order, which
    is the order of first appearance in the data used to build it.
    """

    names: tuple[str, ...]
    levels: tuple[tuple, ...]

    @property
    def K(self) -> int:
        return len(self.levels)

    @property
    def sizes(self) -> NDArray[np.int64]:
        return np.array([len(lv) for lv in self.levels], dtype=np.int64)

    @property
    def offsets(self) -> NDArray[np.int64]:
        return np.concatenate([[0], np.cumsum(self.sizes)]).astype(np.int64)

    @property
    def m(self) -> int:
        return int(self.sizes.sum())

    def index(self, j: int) -> dict:
        """Map from raw label of factor ``j`` to its local column index."""
        return {_label_key(lab): i for i, lab in enumerate(self.levels[j])}

    def factor_of_column(self) -> NDArray[np.int64]:
        return np.repeat(np.arange(self.K), self.sizes)


@dataclass(frozen=True)
class IncidenceMatrix:
    """Binary incidence matrix with exactly one nonzero per row and factor.

    ``cols[i, j]`` is the global column hit by observation ``i`` in factor
    ``j``; factor ``j`` owns columns ``offsets[j]:offsets[j+1]``.
    """

    cols: NDArray[np.int64]
    offsets: NDArray[np.int64]

    def __post_init__(self):
        if self.cols.ndim != 2:
            raise ValueError("cols must be a (n, K) array")
        lo = self.offsets[:-1][None, :]
        hi = self.offsets[1:][None, :]
        if self.cols.size and (np.any(self.cols < lo) or np.any(self.cols >= hi)):
            raise ValueError("column index outside its factor range")

    @property
    def n_rows(self) -> int:
        return self.cols.shape[0]

    @property
    def n_cols(self) -> int:
        return int(self.offsets[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def K(self) -> int:
        return self.cols.shape[1]

    @cached_property
    def csr(self) -> sp.csr_matrix:
        n, K = self.cols.shape
        indptr = np.arange(0, n * K + 1, K, dtype=np.int64)
        mat = sp.csr_matrix(
            (np.ones(n * K), self.cols.ravel().copy(), indptr), shape=self.shape
        )
        mat.sort_indices()
        return mat

    def factor(self, j: int) -> sp.csr_matrix:
        """Sparse ``Z_j`` embedded in the full ``n x m`` column space."""
        n = self.n_rows
        return sp.csr_matrix(
            (np.ones(n), self.cols[:, j].copy(), np.arange(n + 1)), shape=self.shape
        )

    def column_counts(self) -> NDArray[np.float64]:
        """``Z^T 1``, the number of occurrences of every level."""
        return np.bincount(self.cols.ravel(), minlength=self.n_cols).astype(float)

    def matvec(self, x: ArrayLike) -> NDArray:
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n_cols:
            raise ValueError(f"dimension mismatch: Z has {self.n_cols} columns, x has {x.shape[0]}")
        return x[self.cols].sum(axis=1)

    def rmatvec(self, v: ArrayLike) -> NDArray:
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n_rows:
            raise ValueError(f"dimension mismatch: Z has {self.n_rows} rows, v has {v.shape[0]}")
        return self.csr.T @ v

    def take(self, rows: ArrayLike) -> "IncidenceMatrix":
        return IncidenceMatrix(self.cols[np.asarray(rows)], self.offsets)


def _label_key(lab):
    # NaN never equals itself; give all missing values one shared key
    if lab is None or (isinstance(lab, float) and np.isnan(lab)):
        return ("__missing__",)
    return lab


def build_incidence(
    labels: Sequence[ArrayLike],
    n: int | None = None,
    names: Sequence[str] | None = None,
) -> tuple[IncidenceMatrix, REStructure]:
    """Build ``Z = (Z_1, ..., Z_K)`` from K categorical label columns.

    Levels are numbered in order of first appearance; missing values form
    a level of their own.

    Parameters
    ----------
    labels : sequence of array-like
        One label column per grouping factor.
    n : int, optional
        Expected number of observations; checked against every column.
    names : sequence of str, optional
        Factor names, defaults to ``g1, g2, ...``.
    """
    cols = [np.asarray(c, dtype=object) if np.asarray(c).dtype.kind == "O" else np.asarray(c)
            for c in labels]
    if len(cols) == 0:
        raise ValueError("at least one grouping factor is required")
    if n is None:
        n = len(cols[0])
    if n == 0:
        raise ValueError("no observations (n = 0)")
    for j, c in enumerate(cols):
        if c.ndim != 1 or len(c) == 0:
            raise ValueError(f"grouping factor {j} is empty")
        if len(c) != n:
            raise ValueError(f"grouping factor {j} has length {len(c)}, expected {n}")
    if names is None:
        names = [f"g{j + 1}" for j in range(len(cols))]

    codes, levels, sizes = [], [], []
    for c in cols:
        code, uniq = pd.factorize(c, sort=False, use_na_sentinel=False)
        codes.append(code.astype(np.int64))
        levels.append(tuple(uniq.tolist() if hasattr(uniq, "tolist") else list(uniq)))
        sizes.append(len(uniq))
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    gcols = np.column_stack([codes[j] + offsets[j] for j in range(len(cols))])
    return IncidenceMatrix(gcols, offsets), REStructure(tuple(names), tuple(levels))


def as_csr(A) -> sp.csr_matrix:
    if isinstance(A, IncidenceMatrix):
        return A.csr
    if isinstance(A, NormalMatrix):
        return A.matrix
    if sp.issparse(A):
        return A.tocsr()
    return sp.csr_matrix(np.asarray(A, dtype=float))


def matvec(A, x: ArrayLike) -> NDArray:
    """Product of a sparse matrix (or incidence / normal matrix) with a dense vector or block."""
    x = np.asarray(x, dtype=float)
    mat = as_csr(A)
    if mat.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {mat.shape} @ {x.shape}")
    return mat @ x


@dataclass
class NormalMatrix:
    """``M = Sigma^{-1} + Z^T W Z`` with its split ``M = L + L^T + D``."""

    matrix: sp.csr_matrix
    sigma_inv: NDArray[np.float64]
    w: NDArray[np.float64]
    diag: NDArray[np.float64] = field(init=False)
    lower: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        self.matrix.sort_indices()
        self.diag = self.matrix.diagonal().copy()
        self.lower = sp.tril(self.matrix, k=-1, format="csr")
        self.lower.sort_indices()

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def tril(self) -> sp.csr_matrix:
        """``L + D`` in CSR with sorted indices."""
        out = sp.tril(self.matrix, k=0, format="csr")
        out.sort_indices()
        return out

    @cached_property
    def triu(self) -> sp.csr_matrix:
        """``(L + D)^T`` in CSR with sorted indices."""
        out = sp.triu(self.matrix, k=0, format="csr")
        out.sort_indices()
        return out

    @cached_property
    def ztwz(self) -> sp.csr_matrix:
        """``Z^T W Z`` alone."""
        return (self.matrix - sp.diags(self.sigma_inv)).tocsr()

    def matvec(self, x: ArrayLike) -> NDArray:
        return self.matrix @ np.asarray(x, dtype=float)

    def lower_solve(self, rhs: NDArray) -> NDArray:
        """Solve ``(L + D) x = rhs``."""
        return _tri_apply(_kernels.lower_solve, self.tril, rhs)

    def upper_solve(self, rhs: NDArray) -> NDArray:
        """Solve ``(L + D)^T x = rhs``."""
        return _tri_apply(_kernels.upper_solve, self.triu, rhs)

    def dense(self) -> NDArray:
        return self.matrix.toarray()


def _tri_apply(kernel, mat: sp.csr_matrix, rhs: NDArray) -> NDArray:
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    block = np.ascontiguousarray(rhs.reshape(rhs.shape[0], -1))
    out = kernel(mat.indptr, mat.indices, mat.data, block)
    return out[:, 0] if vec else out


def assemble_normal_matrix(Z, w: ArrayLike, sigma_inv: ArrayLike) -> NormalMatrix:
    """Assemble ``M = Sigma^{-1} + Z^T W Z`` for diagonal ``W`` and ``Sigma^{-1}``.

    Parameters
    ----------
    Z : IncidenceMatrix or sparse matrix, shape (n, m)
    w : array, shape (n,)
        Diagonal of ``W``; must be nonnegative.
    sigma_inv : array, shape (m,)
        Diagonal of ``Sigma^{-1}``; must be strictly positive.
    """
    Zc = as_csr(Z)
    w = np.asarray(w, dtype=float)
    sigma_inv = np.asarray(sigma_inv, dtype=float)
    n, m = Zc.shape
    if w.shape != (n,):
        raise ValueError(f"W diagonal has shape {w.shape}, expected ({n},)")
    if sigma_inv.shape != (m,):
        raise ValueError(f"Sigma^-1 diagonal has shape {sigma_inv.shape}, expected ({m},)")
    if np.any(sigma_inv <= 0) or not np.all(np.isfinite(sigma_inv)):
        raise ValueError("Sigma^-1 diagonal must be finite and strictly positive")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("W diagonal must be finite and nonnegative")
    ztwz = (Zc.T @ Zc.multiply(w[:, None]).tocsr()).tocsr()
    mat = (ztwz + sp.diags(sigma_inv)).tocsr()
    mat.sum_duplicates()
    return NormalMatrix(mat, sigma_inv.copy(), w.copy())
