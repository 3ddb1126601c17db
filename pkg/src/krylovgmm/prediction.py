"""Posterior predictive means and variances of the latent variable.

For prediction rows with fixed effects ``X_p``, incidence ``Z_po`` into the
training levels and ``Z_pp`` into levels unseen in training,

    omega_p = X_p beta + Z_po b*
    Omega_p = Z_pp Sigma_p Z_pp^T + Z_po M^{-1} Z_po^T
            = Z_po Sigma Z_po^T + Z_pp Sigma_p Z_pp^T - Z_po Sigma Z^T Psi^{-1} Z Sigma Z_po^T

with ``M = Sigma^{-1} + Z^T W Z`` and ``Psi = Z Sigma Z^T + W^{-1}``. The
variance methods are

* ``"alg1"``: stochastic diagonal estimator with Rademacher probes and a
  per-row control variate built from ``Z_po P^{-1} Z_po^T``,
* ``"alg2"``: simulation of ``N(0, M)`` vectors pushed through ``M^{-1}``,
* ``"alg3"``: simulation of ``N(0, Psi)`` vectors pushed through ``Psi^{-1}``,
* ``"lanczos"``: deterministic rank-``k`` Lanczos approximation of
  ``M^{-1}`` on the span needed by the ``Psi`` form,
* ``"cholesky"``: exact, through a dense factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.polynomial.hermite_e import hermegauss
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from krylovgmm.inference import Backend, GroupedDesign, ModelParams, find_mode, normal_matrix
from krylovgmm.krylov import lanczos_partial, pcg, psi_solve
from krylovgmm.oracle import DenseFactor
from krylovgmm.preconditioners import ZICBreakdown, build_preconditioner
from krylovgmm.sparse_core import NormalMatrix

__all__ = [
    "PredictionSpec",
    "PredictiveDist",
    "FittedModel",
    "predict",
    "predict_latent_mean",
    "predict_var_stochastic_diag",
    "predict_cov_sim_normal",
    "predict_cov_sim_psi",
    "predict_var_lanczos",
    "predict_response",
    "PREDICTION_METHODS",
]

PREDICTION_METHODS = ("alg1", "alg2", "alg3", "lanczos", "cholesky")


@dataclass
class PredictionSpec:
    """Design of the prediction rows.

    ``new_factor[j]`` is the grouping factor of new level ``j`` (column
    ``j`` of ``Z_pp``); ``theta`` supplies the prior variances so that
    ``sigma_p = theta[new_factor]``.
    """

    X: NDArray[np.float64]
    Z_po: sp.csr_matrix
    Z_pp: sp.csr_matrix
    new_factor: NDArray[np.int64]
    theta: NDArray[np.float64]

    @property
    def n_p(self) -> int:
        return self.X.shape[0]

    @property
    def sigma_p(self) -> NDArray:
        return np.asarray(self.theta, dtype=float)[self.new_factor]

    def with_theta(self, theta: ArrayLike) -> "PredictionSpec":
        return PredictionSpec(self.X, self.Z_po, self.Z_pp, self.new_factor, np.asarray(theta, dtype=float))

    @classmethod
    def from_labels(
        cls,
        design: GroupedDesign,
        labels: list[ArrayLike],
        X: ArrayLike | None,
        theta: ArrayLike,
        intercept: bool = True,
    ) -> "PredictionSpec":
        """Map raw prediction labels onto training levels; unseen labels become new levels.

        ``X`` holds covariates without the intercept column when
        ``intercept`` is true, mirroring :meth:`GroupedDesign.from_arrays`.
        """
        st = design.structure
        if st is None:
            raise ValueError("the training design carries no level dictionaries")
        if len(labels) != st.K:
            raise ValueError(f"expected {st.K} grouping columns, got {len(labels)}")
        n_p = len(labels[0])
        Xa = np.zeros((n_p, 0)) if X is None else np.asarray(X, dtype=float).reshape(n_p, -1)
        if intercept:
            Xa = np.column_stack([np.ones(n_p), Xa])
        if Xa.shape[1] != design.p:
            raise ValueError(f"prediction covariates have {Xa.shape[1]} columns, model has {design.p}")
        off = design.Z.offsets
        po_rows, po_cols, pp_rows, pp_cols, new_factor = [], [], [], [], []
        n_new = 0
        for k, lab in enumerate(labels):
            lab = np.asarray(lab, dtype=object) if np.asarray(lab).dtype.kind == "O" else np.asarray(lab)
            if len(lab) != n_p:
                raise ValueError("prediction grouping columns differ in length")
            idx = pd.Index(list(st.levels[k])).get_indexer(lab)
            seen = idx >= 0
            rows = np.flatnonzero(seen)
            po_rows.append(rows)
            po_cols.append(idx[seen] + off[k])
            unseen = np.flatnonzero(~seen)
            if unseen.size:
                codes, uniq = pd.factorize(lab[unseen], sort=False, use_na_sentinel=False)
                pp_rows.append(unseen)
                pp_cols.append(codes + n_new)
                new_factor.extend([k] * len(uniq))
                n_new += len(uniq)
        m = design.m
        r = np.concatenate(po_rows) if po_rows else np.zeros(0, int)
        c = np.concatenate(po_cols) if po_cols else np.zeros(0, int)
        Z_po = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n_p, m))
        r = np.concatenate(pp_rows) if pp_rows else np.zeros(0, int)
        c = np.concatenate(pp_cols) if pp_cols else np.zeros(0, int)
        Z_pp = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(n_p, n_new))
        return cls(Xa, Z_po, Z_pp, np.asarray(new_factor, dtype=np.int64), np.asarray(theta, dtype=float))


@dataclass
class FittedModel:
    """Training data, parameters and backend used for prediction."""

    data: GroupedDesign
    params: ModelParams
    backend: Backend = field(default_factory=Backend)
    mode_b: NDArray | None = None

    @classmethod
    def from_fit(cls, fit, data: GroupedDesign) -> "FittedModel":
        return cls(data, fit.params, fit.backend, fit.mode_b)


@dataclass
class PredictiveDist:
    """Latent predictive distribution ``N(mean, diag(var))``.

    ``re_mean`` is the random-effect part ``mean - X_p beta``. ``cov`` is
    filled only by the simulation methods when the full matrix is asked
    for. ``n_clamped`` counts negative variance estimates set to zero.
    """

    mean: NDArray[np.float64]
    var: NDArray[np.float64]
    re_mean: NDArray[np.float64]
    method: str
    s: int | None = None
    cov: NDArray | None = None
    n_clamped: int = 0
    response_mean: NDArray | None = None
    response_var: NDArray | None = None
    diagnostics: dict = field(default_factory=dict)


class _State:
    """Quantities shared by all variance methods for one prediction call."""

    def __init__(self, spec: PredictionSpec, model: FittedModel, tol: float | None):
        data, params, backend = model.data, model.params, model.backend
        self.spec, self.data, self.params, self.backend = spec, data, params, backend
        self.tol = tol if tol is not None else backend.cg_tol_pred
        self.sigma = params.sigma_diag(data.Z.offsets)
        if params.likelihood == "gaussian":
            self.w = np.full(data.n, 1.0 / params.sigma2)
            self.b = None
        else:
            mode = find_mode(data, params, backend, b0=model.mode_b)
            self.w = mode.w
            self.b = mode.b
        self.M: NormalMatrix = normal_matrix(data, params, self.w)
        self._P = None

    @property
    def P(self):
        if self._P is None:
            b = self.backend
            try:
                self._P = build_preconditioner(b.preconditioner, self.M, rank=b.rank, seed=b.seed)
            except ZICBreakdown:
                self._P = build_preconditioner("ssor", self.M)
        return self._P

    def solve(self, V):
        if self.backend.kind == "cholesky":
            return DenseFactor.of(self.M, self.backend.oracle_cap).solve(V)
        return pcg(self.M, self.P, V, tol=self.tol, max_iter=self.backend.max_iter).x

    def pp_var(self) -> NDArray:
        Zpp = self.spec.Z_pp
        return np.asarray(Zpp.multiply(Zpp) @ self.spec.sigma_p).ravel()

    def po_sigma_var(self) -> NDArray:
        Zpo = self.spec.Z_po
        return np.asarray(Zpo.multiply(Zpo) @ self.sigma).ravel()


def _rng(seed: int, stream: int, i: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(i)])


def predict_latent_mean(spec: PredictionSpec, model: FittedModel, tol: float | None = None, _state=None) -> NDArray:
    """``X_p beta + Z_po b*``; for Gaussian responses ``b* = Sigma Z^T Psi^{-1} (y - X beta)``."""
    st = _state or _State(spec, model, tol)
    fixed = spec.X @ st.params.beta
    if st.b is not None:
        return fixed + spec.Z_po @ st.b
    data = st.data
    r = data.y - data.X @ st.params.beta
    wr = st.w * r
    sol = st.solve(data.Z.rmatvec(wr))
    alpha = wr - st.w * data.Z.matvec(sol)
    return fixed + spec.Z_po @ (st.sigma * data.Z.rmatvec(alpha))


def predict_var_stochastic_diag(
    spec: PredictionSpec,
    model: FittedModel,
    s: int = 1000,
    tol: float | None = None,
    seed: int | None = None,
    control_variate: bool = True,
    chunk: int = 100,
    _state=None,
) -> tuple[NDArray, dict]:
    """Predictive variances with the stochastic diagonal estimator.

    ``diag(Z_po M^{-1} Z_po^T)`` is estimated from Rademacher probes
    ``z`` as the mean of ``z * (Z_po M^{-1} Z_po^T z)``, corrected by the
    control variate ``z * (Z_po P^{-1} Z_po^T z)`` whose expectation
    ``diag(Z_po P^{-1} Z_po^T)`` is computed exactly. Weights
    ``c_j = Cov(h_j, r_j) / Var(r_j)`` are estimated per row.
    """
    if s < 2:
        raise ValueError("the control-variate weights need s >= 2")
    st = _state or _State(spec, model, tol)
    seed = st.backend.seed if seed is None else seed
    Zpo = spec.Z_po
    n_p = spec.n_p
    P = st.P
    sh = np.zeros(n_p)
    sr = np.zeros(n_p)
    shh = np.zeros(n_p)
    srr = np.zeros(n_p)
    shr = np.zeros(n_p)
    for start in range(0, s, chunk):
        stop = min(start + chunk, s)
        z1 = np.empty((n_p, stop - start))
        for j, i in enumerate(range(start, stop)):
            z1[:, j] = 2.0 * _rng(seed, 2, i).integers(0, 2, size=n_p) - 1.0
        rhs = np.asarray(Zpo.T @ z1)
        z2 = np.asarray(Zpo @ st.solve(rhs))
        h = z1 * z2
        sh += h.sum(1)
        shh += (h * h).sum(1)
        if control_variate:
            z3 = np.asarray(Zpo @ P.solve(rhs))
            r = z1 * z3
            sr += r.sum(1)
            srr += (r * r).sum(1)
            shr += (h * r).sum(1)
    mh = sh / s
    if control_variate:
        mr = sr / s
        var_r = (srr - s * mr * mr) / (s - 1)
        cov = (shr - s * mh * mr) / (s - 1)
        ok = var_r > 1e-12 * np.maximum(srr / s, 1e-300)
        c = np.where(ok, cov / np.where(ok, var_r, 1.0), 0.0)
        det = _diag_po_pinv_po(Zpo, P)
        est = mh + c * (det - mr)
    else:
        c = np.zeros(n_p)
        est = mh
    return st.pp_var() + est, {"c": c}


def _diag_po_pinv_po(Zpo: sp.csr_matrix, P, chunk: int = 512) -> NDArray:
    """``diag(Z_po P^{-1} Z_po^T)`` as squared column norms of ``P^{-1/2} Z_po^T``."""
    n_p = Zpo.shape[0]
    out = np.zeros(n_p)
    ZT = Zpo.T.tocsc()
    for a in range(0, n_p, chunk):
        b = min(a + chunk, n_p)
        blk = ZT[:, a:b].toarray()
        if not blk.any():
            continue
        H = P.half_inv(blk)
        out[a:b] = (H * H).sum(0)
    return out


def predict_cov_sim_normal(
    spec: PredictionSpec,
    model: FittedModel,
    s: int = 1000,
    tol: float | None = None,
    seed: int | None = None,
    diag_only: bool = True,
    chunk: int = 100,
    _state=None,
) -> tuple[NDArray, NDArray | None]:
    """Predictive (co)variances from ``z ~ N(0, M)`` draws.

    ``z = Sigma^{-1/2} e_1 + Z^T W^{1/2} e_2`` and
    ``Omega_p ~ Z_pp Sigma_p Z_pp^T + mean((Z_po M^{-1} z)(Z_po M^{-1} z)^T)``.
    Returns ``(var, cov)`` with ``cov = None`` when ``diag_only``.
    """
    st = _state or _State(spec, model, tol)
    seed = st.backend.seed if seed is None else seed
    data = st.data
    m, n = data.m, data.n
    Zpo = spec.Z_po
    acc = np.zeros(spec.n_p)
    acc_cov = None if diag_only else np.zeros((spec.n_p, spec.n_p))
    sqrt_w = np.sqrt(st.w)
    for start in range(0, s, chunk):
        stop = min(start + chunk, s)
        e = np.empty((m + n, stop - start))
        for j, i in enumerate(range(start, stop)):
            e[:, j] = _rng(seed, 3, i).standard_normal(m + n)
        z3 = e[:m] / np.sqrt(st.sigma)[:, None] + data.Z.rmatvec(sqrt_w[:, None] * e[m:])
        z4 = np.asarray(Zpo @ st.solve(z3))
        acc += (z4 * z4).sum(1)
        if acc_cov is not None:
            acc_cov += z4 @ z4.T
    var = st.pp_var() + acc / s
    cov = None
    if acc_cov is not None:
        Zpp = spec.Z_pp
        cov = np.asarray((Zpp.multiply(spec.sigma_p) @ Zpp.T).toarray()) + acc_cov / s
    return var, cov


def predict_cov_sim_psi(
    spec: PredictionSpec,
    model: FittedModel,
    s: int = 1000,
    tol: float | None = None,
    seed: int | None = None,
    diag_only: bool = True,
    chunk: int = 100,
    _state=None,
) -> tuple[NDArray, NDArray | None, int]:
    """Predictive (co)variances from ``z ~ N(0, Psi)`` draws.

    ``z = Z Sigma^{1/2} e_1 + W^{-1/2} e_2``, ``z4 = Z_po Sigma Z^T Psi^{-1} z``
    and ``Omega_p ~ Z_po Sigma Z_po^T + Z_pp Sigma_p Z_pp^T - mean(z4 z4^T)``.
    Negative variances are clamped to zero; returns ``(var, cov, n_clamped)``.

    Raises
    ------
    ValueError
        If some ``W_ii = 0`` (``Psi`` needs ``W^{-1}``).
    """
    st = _state or _State(spec, model, tol)
    if np.any(st.w <= 0):
        raise ValueError("this estimator needs W_ii > 0 everywhere; use alg2 instead")
    seed = st.backend.seed if seed is None else seed
    data = st.data
    m, n = data.m, data.n
    Zpo = spec.Z_po
    acc = np.zeros(spec.n_p)
    acc_cov = None if diag_only else np.zeros((spec.n_p, spec.n_p))
    sqrt_sig = np.sqrt(st.sigma)
    for start in range(0, s, chunk):
        stop = min(start + chunk, s)
        e = np.empty((m + n, stop - start))
        for j, i in enumerate(range(start, stop)):
            e[:, j] = _rng(seed, 4, i).standard_normal(m + n)
        z3 = data.Z.matvec(sqrt_sig[:, None] * e[:m]) + e[m:] / np.sqrt(st.w)[:, None]
        if st.backend.kind == "cholesky":
            wz = st.w[:, None] * z3
            u = wz - st.w[:, None] * data.Z.matvec(st.solve(data.Z.rmatvec(wz)))
        else:
            u = psi_solve(data.Z, st.M, st.P, z3, tol=st.tol, max_iter=st.backend.max_iter)
        z4 = np.asarray(Zpo @ (st.sigma[:, None] * data.Z.rmatvec(u)))
        acc += (z4 * z4).sum(1)
        if acc_cov is not None:
            acc_cov += z4 @ z4.T
    var = st.po_sigma_var() + st.pp_var() - acc / s
    cov = None
    if acc_cov is not None:
        Zpo_s = Zpo.multiply(st.sigma)
        Zpp = spec.Z_pp
        cov = (Zpo_s @ Zpo.T + Zpp.multiply(spec.sigma_p) @ Zpp.T).toarray() - acc_cov / s
    neg = var < 0
    var = np.where(neg, 0.0, var)
    return var, cov, int(neg.sum())


def predict_var_lanczos(
    spec: PredictionSpec, model: FittedModel, k: int = 50, _state=None
) -> tuple[NDArray, int]:
    """Deterministic predictive variances from ``k`` Lanczos steps on ``M``.

    With ``B = Z^T W Z Sigma Z_po^T``, ``M^{-1} B`` is replaced by
    ``Q T^{-1} Q^T B``; the start vector is the normalized column average
    of ``B``. Returns ``(var, achieved_rank)``.
    """
    if k < 1:
        raise ValueError("rank must be at least 1")
    st = _state or _State(spec, model, None)
    Zpo = spec.Z_po
    G = st.M.ztwz
    V = sp.csr_matrix(Zpo.T.multiply(st.sigma[:, None]))
    B = sp.csr_matrix(G @ V)
    base = st.po_sigma_var() + st.pp_var() - np.asarray(V.multiply(B).sum(0)).ravel()
    q0 = np.asarray(B.sum(1)).ravel() / max(spec.n_p, 1)
    if not np.any(q0):
        return base, 0
    Q, T = lanczos_partial(st.M, q0, k)
    C = np.asarray((B.T @ Q).T)
    L = np.linalg.cholesky(T)
    H = sla.solve_triangular(L, C, lower=True)
    return base + (H * H).sum(0), Q.shape[1]


def _exact_var(st: _State) -> NDArray:
    F = DenseFactor.of(st.M, st.backend.oracle_cap)
    Zpo = st.spec.Z_po
    out = np.zeros(st.spec.n_p)
    ZT = Zpo.T.tocsc()
    L = F.lower
    for a in range(0, st.spec.n_p, 1024):
        b = min(a + 1024, st.spec.n_p)
        H = sla.solve_triangular(L, ZT[:, a:b].toarray(), lower=True)
        out[a:b] = (H * H).sum(0)
    return st.pp_var() + out


def predict(
    spec: PredictionSpec,
    model: FittedModel,
    method: str = "alg1",
    s: int = 1000,
    k: int = 50,
    tol: float | None = None,
    seed: int | None = None,
    cap: int | None = None,
    diag_only: bool = True,
    control_variate: bool = True,
) -> PredictiveDist:
    """Latent predictive means and variances with the chosen variance method."""
    if method not in PREDICTION_METHODS:
        raise ValueError(f"unknown prediction method {method!r}; choose from {PREDICTION_METHODS}")
    if method == "cholesky":
        bk = model.backend.with_(kind="cholesky", oracle_cap=cap or model.backend.oracle_cap)
        model = FittedModel(model.data, model.params, bk, model.mode_b)
    st = _State(spec, model, tol)
    mean = predict_latent_mean(spec, model, _state=st)
    fixed = spec.X @ model.params.beta
    cov = None
    n_clamped = 0
    diag = {}
    if method == "cholesky":
        var = _exact_var(st)
    elif method == "alg1":
        var, diag = predict_var_stochastic_diag(spec, model, s, seed=seed, control_variate=control_variate, _state=st)
    elif method == "alg2":
        var, cov = predict_cov_sim_normal(spec, model, s, seed=seed, diag_only=diag_only, _state=st)
    elif method == "alg3":
        var, cov, n_clamped = predict_cov_sim_psi(spec, model, s, seed=seed, diag_only=diag_only, _state=st)
    else:
        var, rank = predict_var_lanczos(spec, model, k, _state=st)
        diag = {"rank": rank}
        neg = var < 0
        n_clamped = int(neg.sum())
        var = np.where(neg, 0.0, var)
    return PredictiveDist(
        mean=mean,
        var=var,
        re_mean=mean - fixed,
        method=method,
        s=s if method in ("alg1", "alg2", "alg3") else None,
        cov=cov,
        n_clamped=n_clamped,
        diagnostics=diag,
    )


def predict_response(dist: PredictiveDist, params: ModelParams, n_points: int = 20) -> PredictiveDist:
    """Add response-scale means and variances.

    Gaussian: mean unchanged, variance plus the error variance. Bernoulli:
    ``P(y = 1) = E[sigmoid(mu)]`` under ``mu ~ N(mean, var)`` by
    Gauss-Hermite quadrature with ``n_points`` nodes.
    """
    if params.likelihood == "gaussian":
        dist.response_mean = dist.mean.copy()
        dist.response_var = dist.var + params.sigma2
        return dist
    x, wts = hermegauss(n_points)
    wts = wts / np.sqrt(2 * np.pi)
    sd = np.sqrt(np.maximum(dist.var, 0.0))
    p = expit(dist.mean[:, None] + sd[:, None] * x[None, :]) @ wts
    dist.response_mean = p
    dist.response_var = p * (1 - p)
    return dist
