"""Negative log-marginal likelihoods and their gradients.

Gaussian responses use the exact marginal likelihood with the Woodbury
identity and the matrix determinant lemma; other responses use the
Laplace approximation around the posterior mode ``b*`` of the random
effects. Linear algebra with ``M = Sigma^{-1} + Z^T W Z`` is delegated to
one of two engines: ``"krylov"`` (preconditioned CG, SLQ and stochastic
trace estimation) or ``"cholesky"`` (dense exact factorization).

Variance parameters are handled on the log scale; the packed parameter
vector is ``[log sigma_1^2, ..., log sigma_K^2, log xi, beta]`` where
``xi`` is the Gaussian error variance (absent for Bernoulli).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray

from krylovgmm.krylov import (
    ProbeSet,
    SLQEstimate,
    pcg,
    psi_solve,
    slq_logdet,
    ste_diag_zminvz,
    ste_logdet_grad_theta,
)
from krylovgmm.likelihoods import DerivStack, Likelihood, make_likelihood
from krylovgmm.oracle import DEFAULT_CAP, DenseFactor
from krylovgmm.preconditioners import Preconditioner, ZICBreakdown, build_preconditioner
from krylovgmm.sparse_core import (
    IncidenceMatrix,
    NormalMatrix,
    REStructure,
    assemble_normal_matrix,
    build_incidence,
)

__all__ = [
    "GroupedDesign",
    "ModelParams",
    "Backend",
    "ModeState",
    "NLLBundle",
    "ModeNotConverged",
    "find_mode",
    "gaussian_nll",
    "laplace_nll",
    "nll",
    "normal_matrix",
    "make_engine",
]


class ModeNotConverged(RuntimeError):
    """Newton's method for the Laplace mode did not converge."""


@dataclass
class GroupedDesign:
    """Response, fixed-effect covariates and grouping-factor incidence."""

    y: NDArray[np.float64]
    X: NDArray[np.float64]
    Z: IncidenceMatrix
    structure: REStructure | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.X = np.asarray(self.X, dtype=float).reshape(self.y.size, -1)
        if self.Z.n_rows != self.y.size:
            raise ValueError(f"Z has {self.Z.n_rows} rows but y has {self.y.size} entries")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.Z.K

    @property
    def m(self) -> int:
        return self.Z.n_cols

    @property
    def sizes(self) -> NDArray[np.int64]:
        return np.diff(self.Z.offsets)

    @classmethod
    def from_arrays(
        cls,
        y: ArrayLike,
        X: ArrayLike | None,
        groups: Sequence[ArrayLike],
        names: Sequence[str] | None = None,
        intercept: bool = True,
    ) -> "GroupedDesign":
        """Build from raw label columns; prepends an intercept column when asked."""
        y = np.asarray(y, dtype=float)
        n = y.size
        Xa = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
        if intercept:
            Xa = np.column_stack([np.ones(n), Xa])
        Z, st = build_incidence(groups, n=n, names=names)
        return cls(y, Xa, Z, st)

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        response: str,
        fixed: Sequence[str],
        groups: Sequence[str],
        intercept: bool = True,
    ) -> "GroupedDesign":
        for col in [response, *fixed, *groups]:
            if col not in df.columns:
                raise KeyError(col)
        X = df[list(fixed)].to_numpy(dtype=float) if fixed else None
        out = cls.from_arrays(
            df[response].to_numpy(dtype=float), X, [df[g].to_numpy() for g in groups], list(groups), intercept
        )
        out.covariate_names = (("intercept",) if intercept else ()) + tuple(fixed)
        return out

    def take(self, rows: ArrayLike) -> "GroupedDesign":
        rows = np.asarray(rows)
        return GroupedDesign(self.y[rows], self.X[rows], self.Z.take(rows), self.structure, self.covariate_names)


@dataclass(frozen=True)
class ModelParams:
    """Variance components, auxiliary likelihood parameters and coefficients.

    ``theta`` holds the random-effect variances ``sigma_k^2``; ``aux``
    holds the error variance for Gaussian responses and is empty for
    Bernoulli.
    """

    theta: NDArray[np.float64]
    beta: NDArray[np.float64]
    likelihood: str = "gaussian"
    aux: NDArray[np.float64] = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float).ravel())
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).ravel())
        lik = self.likelihood.lower()
        if lik in ("normal",):
            lik = "gaussian"
        if lik in ("binary", "logit", "bernoulli_logit"):
            lik = "bernoulli"
        object.__setattr__(self, "likelihood", lik)
        aux = np.asarray(self.aux, dtype=float).ravel()
        if lik == "bernoulli":
            aux = np.zeros(0)
        object.__setattr__(self, "aux", aux)
        if np.any(~(self.theta > 0)):
            raise ValueError("random-effect variances must be positive")
        if np.any(~(self.aux > 0)):
            raise ValueError("auxiliary parameters must be positive")

    @classmethod
    def gaussian(cls, theta, sigma2: float, beta) -> "ModelParams":
        return cls(theta, beta, "gaussian", np.array([sigma2]))

    @classmethod
    def bernoulli(cls, theta, beta) -> "ModelParams":
        return cls(theta, beta, "bernoulli", np.zeros(0))

    @property
    def K(self) -> int:
        return self.theta.size

    @property
    def sigma2(self) -> float:
        if self.likelihood != "gaussian":
            raise AttributeError("only Gaussian models have an error variance")
        return float(self.aux[0])

    def lik(self) -> Likelihood:
        return make_likelihood(self.likelihood, float(self.aux[0]) if self.aux.size else 1.0)

    def sigma_diag(self, offsets: NDArray) -> NDArray:
        return np.repeat(self.theta, np.diff(offsets))

    def pack(self) -> NDArray:
        return np.concatenate([np.log(self.theta), np.log(self.aux), self.beta])

    def unpack(self, vec: ArrayLike) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        K, q = self.K, self.aux.size
        return ModelParams(np.exp(vec[:K]), vec[K + q:], self.likelihood, np.exp(vec[K:K + q]))

    def names(self, covariates: Sequence[str] = ()) -> list[str]:
        out = [f"sigma2_{k + 1}" for k in range(self.K)]
        if self.likelihood == "gaussian":
            out.append("sigma2")
        cov = list(covariates) if len(covariates) == self.beta.size else [f"beta_{j}" for j in range(self.beta.size)]
        return out + cov


@dataclass(frozen=True)
class Backend:
    """Numerical backend settings.

    ``kind`` is ``"krylov"`` or ``"cholesky"``. The Krylov fields are
    ignored by the Cholesky backend.
    """

    kind: str = "krylov"
    preconditioner: str = "ssor"
    t: int = 50
    seed: int = 0
    cg_tol: float = 1e-2
    cg_tol_mode: float = 1e-6
    cg_tol_pred: float = 1e-3
    max_iter: int = 1000
    rank: int = 50
    control_variate: bool = True
    zic_fallback: bool = True
    oracle_cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.kind not in ("krylov", "cholesky"):
            raise ValueError(f"unknown backend {self.kind!r}")

    def probes(self, stream: int = 0) -> ProbeSet:
        return ProbeSet(t=self.t, seed=self.seed, kind="gaussian_p", stream=stream)

    def with_(self, **kw) -> "Backend":
        return replace(self, **kw)


class CholeskyEngine:
    """Exact linear algebra with ``M`` via a dense Cholesky factor."""

    kind = "cholesky"

    def __init__(self, M: NormalMatrix, backend: Backend):
        self.M = M
        self.factor = DenseFactor.of(M, backend.oracle_cap)
        self.diagnostics: dict = {}

    def solve(self, V, tol=None):
        return self.factor.solve(V)

    def logdet(self) -> float:
        return self.factor.logdet

    def logdet_grad_theta(self, offsets):
        dinv = self.factor.diag_inverse()
        g = np.array([-(self.M.sigma_inv[a:b] * dinv[a:b]).sum() for a, b in zip(offsets[:-1], offsets[1:])])
        return g, np.zeros_like(g)

    def diag_zminvz(self, Z):
        d = self.factor.diag_zinvz(Z)
        return d, np.zeros_like(d)


class KrylovEngine:
    """Matrix-free linear algebra with ``M``: PCG, SLQ and STE."""

    kind = "krylov"

    def __init__(self, M: NormalMatrix, backend: Backend, stream: int = 0):
        self.M = M
        self.backend = backend
        self.stream = stream
        self.diagnostics: dict = {"preconditioner": backend.preconditioner, "cg_iterations": []}
        self.P = self._build_preconditioner()
        self._slq: SLQEstimate | None = None

    def _build_preconditioner(self) -> Preconditioner:
        b = self.backend
        try:
            return build_preconditioner(b.preconditioner, self.M, rank=b.rank, seed=b.seed)
        except ZICBreakdown as exc:
            if not b.zic_fallback:
                raise
            self.diagnostics["zic_fallback"] = str(exc)
            self.diagnostics["preconditioner"] = "ssor"
            return build_preconditioner("ssor", self.M)

    def solve(self, V, tol=None):
        res = pcg(self.M, self.P, V, tol=tol or self.backend.cg_tol, max_iter=self.backend.max_iter)
        self.diagnostics["cg_iterations"].append(int(res.iterations.max()))
        return res.x

    @property
    def slq(self) -> SLQEstimate:
        if self._slq is None:
            b = self.backend
            self._slq = slq_logdet(self.M, self.P, b.probes(self.stream), tol=b.cg_tol, max_iter=b.max_iter)
            self.diagnostics["slq_stderr"] = self._slq.stderr
            self.diagnostics["slq_iterations"] = float(self._slq.iterations.mean())
        return self._slq

    def logdet(self) -> float:
        return self.slq.value

    def logdet_grad_theta(self, offsets):
        return ste_logdet_grad_theta(self.M, self.slq, offsets, self.backend.control_variate)

    def diag_zminvz(self, Z):
        return ste_diag_zminvz(Z, self.slq, self.backend.control_variate)


def make_engine(M: NormalMatrix, backend: Backend, stream: int = 0):
    if backend.kind == "cholesky":
        return CholeskyEngine(M, backend)
    return KrylovEngine(M, backend, stream)


def normal_matrix(data: GroupedDesign, params: ModelParams, w: NDArray) -> NormalMatrix:
    if params.K != data.K:
        raise ValueError(f"params have {params.K} variance components, design has {data.K} factors")
    return assemble_normal_matrix(data.Z, w, 1.0 / params.sigma_diag(data.Z.offsets))


@dataclass
class ModeState:
    """Posterior mode ``b*`` of the random effects and the quantities at it."""

    b: NDArray[np.float64]
    mu: NDArray[np.float64]
    derivs: DerivStack
    M: NormalMatrix
    iterations: int
    converged: bool
    objective: float

    @property
    def w(self) -> NDArray:
        return self.derivs.w


@dataclass
class NLLBundle:
    """Negative log-marginal likelihood with its gradient in packed coordinates."""

    value: float
    grad: NDArray[np.float64] | None
    backend: str
    diagnostics: dict = field(default_factory=dict)
    mode: ModeState | None = None
    grad_stderr: NDArray[np.float64] | None = None


def _inner_objective(lik, y, F, Z, b, sigma_inv):
    return lik.logp(y, F + Z.matvec(b)) - 0.5 * float(b @ (sigma_inv * b))


def find_mode(
    data: GroupedDesign,
    params: ModelParams,
    backend: Backend = Backend(),
    b0: NDArray | None = None,
    tol_mode: float = 1e-8,
    max_newton: int = 100,
    max_halvings: int = 10,
) -> ModeState:
    """Newton's method for ``b* = argmax_b log p(y | F + Z b) - b^T Sigma^{-1} b / 2``.

    Stops when the relative change of the inner objective falls below
    ``tol_mode``. A step that decreases the objective is halved up to
    ``max_halvings`` times.

    Raises
    ------
    ModeNotConverged
        After ``max_newton`` iterations without convergence.
    FloatingPointError
        If the inner objective becomes non-finite.
    """
    lik = params.lik()
    lik.validate(data.y)
    Z = data.Z
    sigma_inv = 1.0 / params.sigma_diag(Z.offsets)
    F = data.X @ params.beta
    b = np.zeros(data.m) if b0 is None else np.asarray(b0, dtype=float).copy()
    obj = _inner_objective(lik, data.y, F, Z, b, sigma_inv)
    if not np.isfinite(obj):
        raise FloatingPointError("inner objective is not finite at the starting point")
    converged = False
    it = 0
    for it in range(1, max_newton + 1):
        ds = lik.derivs(data.y, F + Z.matvec(b))
        M = assemble_normal_matrix(Z, ds.w, sigma_inv)
        grad = Z.rmatvec(ds.d1) - sigma_inv * b
        eng = make_engine(M, backend)
        step = eng.solve(grad, tol=backend.cg_tol_mode)
        lam = 1.0
        for _ in range(max_halvings + 1):
            b_new = b + lam * step
            obj_new = _inner_objective(lik, data.y, F, Z, b_new, sigma_inv)
            if np.isfinite(obj_new) and obj_new >= obj - 1e-12 * abs(obj):
                break
            lam *= 0.5
        if not np.isfinite(obj_new):
            raise FloatingPointError("inner objective became non-finite during Newton iterations")
        change = abs(obj_new - obj)
        b, obj = b_new, obj_new
        if change <= tol_mode * max(abs(obj), 1.0):
            converged = True
            break
    if not converged:
        raise ModeNotConverged(f"Newton did not converge in {max_newton} iterations (last objective {obj:.6g})")
    mu = F + Z.matvec(b)
    ds = lik.derivs(data.y, mu)
    M = assemble_normal_matrix(Z, ds.w, sigma_inv)
    return ModeState(b, mu, ds, M, it, converged, obj)


def gaussian_nll(
    data: GroupedDesign, params: ModelParams, backend: Backend = Backend(), need_grad: bool = True
) -> NLLBundle:
    """Exact Gaussian negative log-likelihood with ``Psi = Z Sigma Z^T + sigma^2 I``.

    ``log det(Psi) = log det(M) + log det(Sigma) + n log sigma^2`` and
    ``r^T Psi^{-1} r`` is evaluated through the Woodbury identity.
    """
    if params.likelihood != "gaussian":
        raise ValueError("gaussian_nll needs a Gaussian likelihood")
    n, K = data.n, data.K
    s2 = params.sigma2
    w = np.full(n, 1.0 / s2)
    M = normal_matrix(data, params, w)
    eng = make_engine(M, backend)
    r = data.y - data.X @ params.beta
    sol = eng.solve(data.Z.rmatvec(w * r))
    alpha = w * r - w * data.Z.matvec(sol)
    sizes = data.sizes
    logdet_m = eng.logdet()
    logdet_psi = logdet_m + float(sizes @ np.log(params.theta)) + n * np.log(s2)
    value = 0.5 * n * np.log(2 * np.pi) + 0.5 * logdet_psi + 0.5 * float(r @ alpha)
    out = NLLBundle(float(value), None, backend.kind, eng.diagnostics)
    if not need_grad:
        return out
    g, g_se = eng.logdet_grad_theta(data.Z.offsets)
    zta = data.Z.rmatvec(alpha)
    off = data.Z.offsets
    d_theta = np.array(
        [0.5 * (g[k] + sizes[k]) - 0.5 * params.theta[k] * float(zta[off[k]:off[k + 1]] @ zta[off[k]:off[k + 1]])
         for k in range(K)]
    )
    # tr(M^{-1} Z^T W Z) = m - tr(M^{-1} Sigma^{-1})
    g_s2 = -data.m - g.sum()
    d_s2 = 0.5 * (g_s2 + n) - 0.5 * s2 * float(alpha @ alpha)
    d_beta = -data.X.T @ alpha
    out.grad = np.concatenate([d_theta, [d_s2], d_beta])
    out.grad_stderr = np.concatenate([0.5 * g_se, [0.5 * np.sqrt((g_se ** 2).sum())], np.zeros(data.p)])
    return out


def laplace_nll(
    data: GroupedDesign,
    params: ModelParams,
    backend: Backend = Backend(),
    mode: ModeState | None = None,
    need_grad: bool = True,
    b0: NDArray | None = None,
) -> NLLBundle:
    """Laplace-approximated negative log-marginal likelihood.

    ``-log p(y | mu*) + b*^T Sigma^{-1} b* / 2 + log det(Sigma) / 2 + log det(M) / 2``
    with ``M`` evaluated at the mode. The gradient combines the explicit
    dependence on each parameter with the implicit dependence through
    ``b*``; both need ``d log det(M) / d mu*``, which costs one extra solve.
    """
    if mode is None:
        mode = find_mode(data, params, backend, b0=b0)
    if not mode.converged:
        raise ModeNotConverged("laplace_nll requires a converged mode")
    lik = params.lik()
    Z = data.Z
    K = data.K
    off = Z.offsets
    sizes = data.sizes
    sigma_inv = 1.0 / params.sigma_diag(off)
    b = mode.b
    ds = mode.derivs
    eng = make_engine(mode.M, backend)
    logdet_m = eng.logdet()
    value = -ds.logp + 0.5 * float(b @ (sigma_inv * b)) + 0.5 * float(sizes @ np.log(params.theta)) + 0.5 * logdet_m
    out = NLLBundle(float(value), None, backend.kind, eng.diagnostics, mode)
    if not need_grad:
        return out

    g, g_se = eng.logdet_grad_theta(off)
    need_diag = np.any(ds.d3 != 0) or lik.n_aux > 0
    if need_diag:
        dz, dz_se = eng.diag_zminvz(Z)
    else:
        dz = dz_se = np.zeros(data.n)
    # s2 = d (log det M / 2) / d mu*
    s2 = -0.5 * ds.d3 * dz
    if np.any(s2 != 0):
        v = eng.solve(Z.rmatvec(s2))
    else:
        v = np.zeros(data.m)

    d_theta = np.empty(K)
    for k in range(K):
        sl = slice(off[k], off[k + 1])
        si = sigma_inv[sl]
        d_theta[k] = (
            -0.5 * float(si @ (b[sl] ** 2)) + 0.5 * sizes[k] + 0.5 * g[k] + float(si @ (v[sl] * b[sl]))
        )
    dF = -ds.d1 + s2 - ds.w * Z.matvec(v)
    d_beta = data.X.T @ dF
    parts = [d_theta]
    if lik.n_aux:
        dlogp, dd1, dw = lik.aux_derivs(data.y, mode.mu)
        zv = Z.matvec(v)
        d_aux = -dlogp + 0.5 * (dw @ dz) + dd1 @ zv
        parts.append(d_aux)
    parts.append(d_beta)
    out.grad = np.concatenate(parts)
    se_aux = [0.5 * np.sqrt(((dw * dz_se) ** 2).sum(axis=1))] if lik.n_aux else []
    out.grad_stderr = np.concatenate([0.5 * g_se, *se_aux, np.zeros(data.p)])
    return out


def nll(
    data: GroupedDesign,
    params: ModelParams,
    backend: Backend = Backend(),
    need_grad: bool = True,
    b0: NDArray | None = None,
    laplace: bool | None = None,
) -> NLLBundle:
    """Dispatch to :func:`gaussian_nll` or :func:`laplace_nll`.

    ``laplace=True`` forces the Laplace path even for Gaussian responses.
    """
    use_laplace = params.likelihood != "gaussian" if laplace is None else laplace
    if use_laplace:
        return laplace_nll(data, params, backend, need_grad=need_grad, b0=b0)
    return gaussian_nll(data, params, backend, need_grad=need_grad)
