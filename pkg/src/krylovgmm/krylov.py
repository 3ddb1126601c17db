"""Krylov solvers and stochastic estimators.

Preconditioned conjugate gradients with capture of the Lanczos tridiagonal
matrix, partial Lanczos with full reorthogonalization, stochastic Lanczos
quadrature (SLQ) for ``log det(M)``, and stochastic trace estimators (STE)
with SSOR control variates for derivatives of ``log det(M)`` and for the
Fisher information of Gaussian models.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh_tridiagonal

from krylovgmm.preconditioners import Preconditioner, SSORPreconditioner
from krylovgmm.sparse_core import IncidenceMatrix, NormalMatrix

__all__ = [
    "CGResult",
    "CGBreakdown",
    "CGNotConverged",
    "ProbeSet",
    "SLQEstimate",
    "pcg",
    "lanczos_partial",
    "tridiag_from_cg",
    "slq_logdet",
    "ste_trace_diag",
    "ste_logdet_grad_theta",
    "ste_diag_zminvz",
    "ste_logdet_grad_mode",
    "ste_fisher_information",
    "psi_solve",
]


class CGBreakdown(ArithmeticError):
    """CG produced a non-positive curvature ``h^T M h`` or non-finite iterates."""


class CGNotConverged(RuntimeWarning):
    """CG reached ``max_iter`` before the residual tolerance."""


def _operator(A) -> Callable[[NDArray], NDArray]:
    if isinstance(A, NormalMatrix):
        return A.matrix.__matmul__
    if callable(A):
        return A
    return A.__matmul__


@dataclass
class CGResult:
    """Output of :func:`pcg` for a block of right-hand sides.

    ``alphas[j]`` / ``betas[j]`` hold the CG step coefficients of column
    ``j`` when tridiagonal capture was requested. ``rhs_pnorm2`` is
    ``b^T P^{-1} b`` per column.
    """

    x: NDArray
    iterations: NDArray
    residual_norms: NDArray
    converged: NDArray
    rhs_pnorm2: NDArray
    alphas: list[NDArray] | None = None
    betas: list[NDArray] | None = None

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def tridiag(self, j: int = 0) -> tuple[NDArray, NDArray]:
        """Diagonal and off-diagonal of the Lanczos matrix for column ``j``."""
        if self.alphas is None:
            raise ValueError("tridiagonal matrices were not captured")
        return tridiag_from_cg(self.alphas[j], self.betas[j])


def tridiag_from_cg(alphas: NDArray, betas: NDArray) -> tuple[NDArray, NDArray]:
    """Lanczos tridiagonal entries implied by PCG coefficients.

    ``T_jj = 1/alpha_j + beta_{j-1}/alpha_{j-1}`` and
    ``T_{j,j+1} = sqrt(beta_j)/alpha_j``.
    """
    alphas = np.asarray(alphas, dtype=float)
    betas = np.asarray(betas, dtype=float)[: max(alphas.size - 1, 0)]
    diag = 1.0 / alphas
    diag[1:] += betas / alphas[:-1]
    off = np.sqrt(betas) / alphas[:-1]
    return diag, off


def pcg(
    A,
    P: Preconditioner,
    b: NDArray,
    tol: float = 1e-2,
    max_iter: int = 1000,
    capture_tridiag: bool = False,
) -> CGResult:
    """Preconditioned conjugate gradients for ``A x = b`` starting from ``x = 0``.

    Columns of a block ``b`` are iterated together and frozen individually
    once ``||r||_2 < tol``.

    Parameters
    ----------
    A : NormalMatrix, sparse matrix or callable
        Symmetric positive definite operator.
    P : Preconditioner
    b : array, shape (m,) or (m, t)
    tol : float
        Absolute tolerance on the Euclidean residual norm.
    max_iter : int
        Iteration cap; columns still active then are flagged and a
        :class:`CGNotConverged` warning is issued.
    capture_tridiag : bool
        Record step coefficients so :meth:`CGResult.tridiag` can rebuild
        the Lanczos matrix of ``P^{-1/2} A P^{-T/2}``.

    Raises
    ------
    CGBreakdown
        If ``h^T A h <= 0`` or any iterate becomes non-finite.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    op = _operator(A)
    b = np.asarray(b, dtype=float)
    vec = b.ndim == 1
    B = b.reshape(b.shape[0], -1)
    m, t = B.shape
    X = np.zeros_like(B)
    R = B.copy()
    Zr = np.asarray(P.solve(R)).reshape(m, t)
    H = Zr.copy()
    rz = np.einsum("ij,ij->j", R, Zr)
    pnorm2 = rz.copy()
    rnorm = np.linalg.norm(R, axis=0)
    active = rnorm >= tol
    iters = np.zeros(t, dtype=np.int64)
    alph = [[] for _ in range(t)] if capture_tridiag else None
    bet = [[] for _ in range(t)] if capture_tridiag else None

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        full = idx.size == t
        Hs = H if full else H[:, idx]
        V = np.asarray(op(Hs)).reshape(m, idx.size)
        hv = np.einsum("ij,ij->j", Hs, V)
        if not np.all(np.isfinite(hv)):
            raise CGBreakdown("non-finite values in CG iterates")
        if np.any(hv <= 0):
            raise CGBreakdown(f"non-positive curvature h^T A h = {hv.min():.3e}; operator or preconditioner not SPD")
        a = rz[idx] / hv
        if full:
            X += a * Hs
            R -= a * V
            Rs = R
        else:
            X[:, idx] += a * Hs
            R[:, idx] -= a * V
            Rs = R[:, idx]
        iters[idx] += 1
        rn = np.linalg.norm(Rs, axis=0)
        if not np.all(np.isfinite(rn)):
            raise CGBreakdown("non-finite residual in CG")
        rnorm[idx] = rn
        done = rn < tol
        if capture_tridiag:
            for c, j in enumerate(idx):
                alph[j].append(a[c])
        cont = idx[~done]
        active[idx[done]] = False
        if cont.size:
            Rc = R[:, cont]
            Zc = np.asarray(P.solve(Rc)).reshape(m, cont.size)
            rzn = np.einsum("ij,ij->j", Rc, Zc)
            beta = rzn / rz[cont]
            H[:, cont] = Zc + beta * H[:, cont]
            rz[cont] = rzn
            if capture_tridiag:
                for c, j in enumerate(cont):
                    bet[j].append(beta[c])

    converged = ~active
    if not np.all(converged):
        warnings.warn(
            f"CG did not reach tol={tol:g} within {max_iter} iterations for "
            f"{int((~converged).sum())} of {t} right-hand sides (max residual {rnorm.max():.3e})",
            CGNotConverged,
            stacklevel=2,
        )
    return CGResult(
        x=X[:, 0] if vec else X,
        iterations=iters,
        residual_norms=rnorm,
        converged=converged,
        rhs_pnorm2=pnorm2,
        alphas=[np.array(v) for v in alph] if capture_tridiag else None,
        betas=[np.array(v) for v in bet] if capture_tridiag else None,
    )


def lanczos_partial(
    A, q0: NDArray, k: int, breakdown_tol: float = 1e-12
) -> tuple[NDArray, NDArray]:
    """``k`` steps of Lanczos with full reorthogonalization.

    Returns ``Q`` (``m x k'``, orthonormal columns) and the dense symmetric
    tridiagonal ``T = Q^T A Q`` (``k' x k'``), where ``k' < k`` if the
    Krylov space is exhausted early.
    """
    op = _operator(A)
    q = np.asarray(q0, dtype=float)
    nq = np.linalg.norm(q)
    if not nq > 0:
        raise ValueError("start vector must be nonzero")
    m = q.size
    k = min(int(k), m)
    Q = np.zeros((m, k))
    Q[:, 0] = q / nq
    alphas, betas = [], []
    scale = 0.0
    for j in range(k):
        w = np.asarray(op(Q[:, j]), dtype=float).ravel()
        alpha = float(Q[:, j] @ w)
        alphas.append(alpha)
        # two passes of classical Gram-Schmidt against every previous vector
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if j == k - 1:
            break
        if beta <= breakdown_tol * max(scale, 1.0):
            Q = Q[:, : j + 1]
            break
        betas.append(beta)
        Q[:, j + 1] = w / beta
    kk = len(alphas)
    T = np.diag(alphas) + np.diag(betas[: kk - 1], 1) + np.diag(betas[: kk - 1], -1)
    return Q[:, :kk], T


@dataclass(frozen=True)
class ProbeSet:
    """Counter-based random probe vectors.

    Probe ``i`` is drawn from ``np.random.default_rng([seed, stream, i])``
    so every vector can be materialized independently and the set is fixed
    for a given ``(seed, stream)``.

    ``kind`` is ``"gaussian_p"`` (``N(0, P)`` through a preconditioner),
    ``"gaussian"`` (``N(0, I)``) or ``"rademacher"``.
    """

    t: int = 50
    seed: int = 0
    kind: str = "gaussian_p"
    stream: int = 0

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("need at least one probe")
        if self.kind not in ("gaussian_p", "gaussian", "rademacher"):
            raise ValueError(f"unknown probe kind {self.kind!r}")

    def _rng(self, i: int) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), int(self.stream), int(i)])

    def standard_normal(self, dim: int) -> NDArray:
        out = np.empty((dim, self.t))
        for i in range(self.t):
            out[:, i] = self._rng(i).standard_normal(dim)
        return out

    def rademacher(self, dim: int) -> NDArray:
        out = np.empty((dim, self.t))
        for i in range(self.t):
            out[:, i] = 2.0 * self._rng(i).integers(0, 2, size=dim) - 1.0
        return out

    def draw(self, dim: int) -> NDArray:
        if self.kind == "rademacher":
            return self.rademacher(dim)
        return self.standard_normal(dim)

    def sample_p(self, P: Preconditioner) -> tuple[NDArray, NDArray]:
        """``(z, eps)`` with ``z = P^{1/2} eps ~ N(0, P)``."""
        eps = self.standard_normal(P.sample_dim)
        return np.asarray(P.sample(eps)), eps

    def with_stream(self, stream: int) -> "ProbeSet":
        return replace(self, stream=stream)

    def with_kind(self, kind: str) -> "ProbeSet":
        return replace(self, kind=kind)


@dataclass
class SLQEstimate:
    """SLQ estimate of ``log det(M)`` with the quantities reused by STE."""

    value: float
    logdet_p: float
    contributions: NDArray
    z: NDArray
    eps: NDArray
    solves: NDArray
    psolves: NDArray
    iterations: NDArray
    P: Preconditioner = field(repr=False)

    @property
    def t(self) -> int:
        return self.contributions.size

    @property
    def stderr(self) -> float:
        if self.t < 2:
            return float("nan")
        return float(self.contributions.std(ddof=1) / np.sqrt(self.t))


def _e1_log_e1(diag: NDArray, off: NDArray) -> float:
    if diag.size == 0:
        return 0.0
    if diag.size == 1:
        if diag[0] <= 0:
            raise CGBreakdown("non-positive Lanczos eigenvalue")
        return float(np.log(diag[0]))
    lam, V = eigh_tridiagonal(diag, off)
    if lam[0] <= 0:
        raise CGBreakdown(f"non-positive Lanczos eigenvalue {lam[0]:.3e}")
    return float(V[0] ** 2 @ np.log(lam))


def slq_logdet(
    M: NormalMatrix,
    P: Preconditioner,
    probes: ProbeSet,
    tol: float = 1e-2,
    max_iter: int = 1000,
) -> SLQEstimate:
    """Stochastic Lanczos quadrature for ``log det(M)``.

    ``log det(M) = log det(P) + log det(P^{-1/2} M P^{-T/2})``; the second
    term is estimated as ``(1/t) sum_i ||P^{-1/2} z_i||^2 e_1^T log(T_i) e_1``
    with ``z_i ~ N(0, P)`` and ``T_i`` the Lanczos matrix recovered from the
    PCG run solving ``M x = z_i``. Those solves are kept on the result.
    """
    z, eps = probes.sample_p(P)
    res = pcg(M, P, z, tol=tol, max_iter=max_iter, capture_tridiag=True)
    gam = np.empty(probes.t)
    for i in range(probes.t):
        gam[i] = res.rhs_pnorm2[i] * _e1_log_e1(*res.tridiag(i))
    if isinstance(P, SSORPreconditioner):
        psolves = P.solve_from_eps(eps)
    else:
        psolves = np.asarray(P.solve(z))
    return SLQEstimate(
        value=float(P.logdet + gam.mean()),
        logdet_p=float(P.logdet),
        contributions=gam,
        z=z,
        eps=eps,
        solves=res.x,
        psolves=psolves,
        iterations=res.iterations,
        P=P,
    )


def _combine(h: NDArray, r: NDArray | None, det: NDArray | None) -> tuple[NDArray, NDArray]:
    """Control-variate STE: ``mean(h) - c (mean(r) - det)`` with ``c = Cov(h, r) / Var(r)``.

    ``h`` and ``r`` have probes on the last axis. Returns (estimate, stderr).
    """
    t = h.shape[-1]
    mh = h.mean(-1)
    if r is None or t < 2:
        se = h.std(-1, ddof=1) / np.sqrt(t) if t > 1 else np.full(mh.shape, np.nan)
        return mh, se
    mr = r.mean(-1)
    hc = h - mh[..., None]
    rc = r - mr[..., None]
    var_r = (rc * rc).sum(-1) / (t - 1)
    cov = (hc * rc).sum(-1) / (t - 1)
    ok = var_r > 1e-14 * np.maximum((r * r).mean(-1), 1e-300)
    c = np.where(ok, cov / np.where(ok, var_r, 1.0), 0.0)
    est = mh - c * (mr - det)
    se = (h - c[..., None] * r).std(-1, ddof=1) / np.sqrt(t)
    return est, se


def ste_trace_diag(slq: SLQEstimate, G: NDArray, control_variate: bool = True) -> tuple[NDArray, NDArray]:
    """Estimate ``tr(M^{-1} diag(g_k))`` for every row ``g_k`` of ``G``.

    Uses the solves cached by :func:`slq_logdet`; with an SSOR
    preconditioner the control variate ``tr(P^{-1} dP)`` with
    ``dP = d(L+D) D^{-1} (L+D)^T + ...`` for ``dD = diag(g_k)`` is applied.
    Returns (estimates, standard errors).
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    X, U = slq.solves, slq.psolves
    h = G @ (X * U)
    P = slq.P
    if control_variate and isinstance(P, SSORPreconditioner):
        a = P.lower_inv_from_eps(slq.eps)
        r = G @ (2.0 * U * a - a * a)
        det = G @ (1.0 / P.diag)
        return _combine(h, r, det)
    return _combine(h, None, None)


def ste_logdet_grad_theta(
    M: NormalMatrix, slq: SLQEstimate, offsets: NDArray, control_variate: bool = True
) -> tuple[NDArray, NDArray]:
    """``d log det(M) / d log sigma_k^2`` for every grouping factor ``k``.

    With ``Sigma`` diagonal, ``dM / d log sigma_k^2 = -Sigma^{-1}`` on block
    ``k`` and zero elsewhere.
    """
    K = len(offsets) - 1
    G = np.zeros((K, M.dim))
    for k in range(K):
        sl = slice(offsets[k], offsets[k + 1])
        G[k, sl] = -M.sigma_inv[sl]
    return ste_trace_diag(slq, G, control_variate)


def ste_diag_zminvz(
    Z: IncidenceMatrix, slq: SLQEstimate, control_variate: bool = True
) -> tuple[NDArray, NDArray]:
    """Per-observation estimate of ``diag(Z M^{-1} Z^T)``.

    Entry ``i`` equals ``tr(M^{-1} Z_i^T Z_i)`` for row ``Z_i``; the SSOR
    control variate uses ``d(L+D) = tril(Z_i^T Z_i)``.
    """
    X, U = slq.solves, slq.psolves
    cols = Z.cols
    h = X[cols].sum(axis=1) * U[cols].sum(axis=1)
    P = slq.P
    if control_variate and isinstance(P, SSORPreconditioner):
        a = P.lower_inv_from_eps(slq.eps)
        order = np.argsort(cols, axis=1)
        sc = np.take_along_axis(cols, order, axis=1)
        As = a[sc]
        # u^T tril(e e^T) a = sum_p u_{c_p} sum_{q <= p} a_{c_q}
        r = 2.0 * (U[sc] * np.cumsum(As, axis=1)).sum(axis=1) - (As * As).sum(axis=1)
        det = (1.0 / P.diag)[cols].sum(axis=1)
        return _combine(h, r, det)
    return _combine(h, None, None)


def ste_logdet_grad_mode(
    Z: IncidenceMatrix, slq: SLQEstimate, d3: NDArray, control_variate: bool = True
) -> tuple[NDArray, NDArray]:
    """``d log det(M) / d mu*_i = -d3_i (Z M^{-1} Z^T)_ii`` estimated per observation."""
    est, se = ste_diag_zminvz(Z, slq, control_variate)
    wprime = -np.asarray(d3, dtype=float)
    return wprime * est, np.abs(wprime) * se


def psi_solve(
    Z: IncidenceMatrix, M: NormalMatrix, P: Preconditioner, V: NDArray, tol: float = 1e-2, max_iter: int = 1000
) -> NDArray:
    """``Psi^{-1} V`` with ``Psi = Z Sigma Z^T + W^{-1}`` via Woodbury and CG.

    ``Psi^{-1} = W - W Z M^{-1} Z^T W``.
    """
    V = np.asarray(V, dtype=float)
    w = M.w if V.ndim == 1 else M.w[:, None]
    WV = w * V
    sol = pcg(M, P, Z.rmatvec(WV), tol=tol, max_iter=max_iter).x
    return WV - w * Z.matvec(sol)


def ste_fisher_information(
    Z: IncidenceMatrix,
    M: NormalMatrix,
    P: Preconditioner,
    probes: ProbeSet,
    tol: float = 1e-2,
    max_iter: int = 1000,
    include_error_variance: bool = False,
) -> tuple[NDArray, NDArray]:
    """Fisher information of a Gaussian model in the natural variances.

    ``I_kl = 0.5 tr(Psi^{-1} A_k Psi^{-1} A_l)`` with ``A_k = Z_k Z_k^T``
    (and ``A = I`` for the error variance when requested), each trace
    estimated as ``mean_i (A_k Psi^{-1} z_i)^T (Psi^{-1} A_l z_i)`` over
    ``z_i ~ N(0, I_n)``. Returns the symmetrized matrix and elementwise
    standard errors.
    """
    n = Z.n_rows
    K = Z.K
    zs = probes.standard_normal(n)
    t = probes.t
    factors = [Z.factor(k) for k in range(K)]

    def A(k, V):
        if k == K:
            return V
        F = factors[k]
        return F @ (F.T @ V)

    q = K + 1 if include_error_variance else K
    rhs = np.concatenate([zs] + [A(k, zs) for k in range(K)], axis=1)
    sol = psi_solve(Z, M, P, rhs, tol=tol, max_iter=max_iter)
    psi_z = sol[:, :t]
    b = [sol[:, (k + 1) * t : (k + 2) * t] for k in range(K)]
    if include_error_variance:
        b.append(psi_z)
    a = [A(k, psi_z) for k in range(q)]
    samples = np.empty((q, q, t))
    for k in range(q):
        for l in range(q):
            samples[k, l] = 0.5 * np.einsum("ij,ij->j", a[k], b[l])
    samples = 0.5 * (samples + samples.transpose(1, 0, 2))
    est, se = _combine(samples, None, None)
    return est, se
