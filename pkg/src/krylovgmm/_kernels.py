"""Compiled CSR kernels used on the hot paths of the preconditioners.

All kernels take the three CSR arrays of a triangular matrix with sorted
column indices and operate on a C-contiguous block of right-hand sides of
shape ``(m, k)``.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def lower_solve(indptr, indices, data, rhs):
    """Forward substitution with a lower-triangular CSR matrix (diagonal included)."""
    m, k = rhs.shape
    out = rhs.copy()
    for i in range(m):
        diag = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j < i:
                a = data[p]
                for c in range(k):
                    out[i, c] -= a * out[j, c]
            elif j == i:
                diag = data[p]
        for c in range(k):
            out[i, c] /= diag
    return out


@numba.njit(cache=True)
def upper_solve(indptr, indices, data, rhs):
    """Backward substitution with an upper-triangular CSR matrix (diagonal included)."""
    m, k = rhs.shape
    out = rhs.copy()
    for i in range(m - 1, -1, -1):
        diag = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            if j > i:
                a = data[p]
                for c in range(k):
                    out[i, c] -= a * out[j, c]
            elif j == i:
                diag = data[p]
        for c in range(k):
            out[i, c] /= diag
    return out


@numba.njit(cache=True)
def zic_factor(indptr, indices, data):
    """Zero fill-in incomplete Cholesky on the lower triangle of a symmetric matrix.

    ``indptr/indices/data`` describe ``tril(A)`` in CSR with sorted indices and
    the diagonal present in every row. Returns ``(values, bad_row, pivot)``;
    ``bad_row`` is -1 on success, otherwise the first row whose pivot
    ``A_ii - s`` was not positive (``pivot`` then holds that value).
    """
    m = indptr.shape[0] - 1
    out = np.zeros(data.shape[0])
    diag_pos = np.empty(m, dtype=np.int64)
    for i in range(m):
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            # s = <L_i., L_j.> over columns < j; both rows sorted
            s = 0.0
            pi = indptr[i]
            pj = indptr[j]
            end_i = p
            end_j = diag_pos[j] if j < i else p
            while pi < end_i and pj < end_j:
                ci = indices[pi]
                cj = indices[pj]
                if ci == cj:
                    s += out[pi] * out[pj]
                    pi += 1
                    pj += 1
                elif ci < cj:
                    pi += 1
                else:
                    pj += 1
            if j == i:
                piv = data[p] - s
                if piv <= 0.0:
                    return out, i, piv
                out[p] = np.sqrt(piv)
                diag_pos[i] = p
            else:
                out[p] = (data[p] - s) / out[diag_pos[j]]
    return out, -1, 0.0
