"""Maximum (approximate) marginal likelihood estimation.

All parameters are optimized jointly in the packed coordinates of
:class:`~krylovgmm.inference.ModelParams`. The Krylov backend uses one
probe set for the whole fit (sample average approximation), so the
objective is a deterministic function of the parameters.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as so
from numpy.typing import NDArray

from krylovgmm.inference import Backend, GroupedDesign, ModelParams, NLLBundle, nll, normal_matrix
from krylovgmm.krylov import ProbeSet, psi_solve, ste_fisher_information
from krylovgmm.oracle import chol_fisher
from krylovgmm.preconditioners import ZICBreakdown, build_preconditioner

__all__ = [
    "OptimizerConfig",
    "FitResult",
    "LineSearchFailure",
    "fit",
    "default_init",
    "fisher_information",
    "std_errors",
]


class LineSearchFailure(RuntimeError):
    """Backtracking found no decrease after the allowed number of halvings."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimizer settings.

    ``method`` is ``"lbfgs"`` (limited-memory quasi-Newton from SciPy),
    ``"gd"`` (gradient descent with Armijo backtracking) or ``"fisher"``
    (Fisher scoring for the variances plus generalized least squares for
    ``beta``; Gaussian only).
    """

    method: str = "lbfgs"
    max_iter: int = 1000
    gtol: float = 1e-5
    ftol: float = 1e-8
    max_halvings: int = 30
    armijo: float = 1e-4


@dataclass
class FitResult:
    params: ModelParams
    nll: float
    nll_trace: list[float]
    iterations: int
    reason: str
    converged: bool
    backend: Backend
    n_evals: int = 0
    runtime: float = 0.0
    mode_b: NDArray | None = None
    fisher: NDArray | None = None
    std_errors: NDArray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.backend.seed


def default_init(data: GroupedDesign, likelihood: str = "gaussian") -> ModelParams:
    """``sigma_k^2 = var(y) / (K + 1)``, ``sigma^2 = var(y) / 2``, ``beta = 0``."""
    v = float(np.var(data.y))
    if not v > 0:
        v = 1.0
    theta = np.full(data.K, v / (data.K + 1))
    beta = np.zeros(data.p)
    if likelihood == "gaussian":
        return ModelParams.gaussian(theta, v / 2, beta)
    return ModelParams(theta, beta, likelihood)


class _Objective:
    """Caches evaluations and carries the Laplace mode between calls."""

    def __init__(self, data, template, backend):
        self.data = data
        self.template = template
        self.backend = backend
        self.b0 = None
        self.n_evals = 0
        self.last: tuple[bytes, NLLBundle] | None = None

    def bundle(self, x: NDArray, need_grad: bool = True) -> NLLBundle:
        key = np.asarray(x, dtype=float).tobytes()
        if self.last is not None and self.last[0] == key and (self.last[1].grad is not None or not need_grad):
            return self.last[1]
        params = self.template.unpack(x)
        out = nll(self.data, params, self.backend, need_grad=need_grad, b0=self.b0)
        self.n_evals += 1
        if out.mode is not None:
            self.b0 = out.mode.b
        self.last = (key, out)
        return out

    def __call__(self, x):
        try:
            out = self.bundle(x)
        except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError, RuntimeError):
            return np.inf, np.zeros_like(x)
        return out.value, out.grad


def fit(
    data: GroupedDesign,
    init: ModelParams | None = None,
    backend: Backend = Backend(),
    config: OptimizerConfig = OptimizerConfig(),
    likelihood: str = "gaussian",
    compute_std_errors: bool = False,
) -> FitResult:
    """Estimate variance components, auxiliary parameters and ``beta``.

    Raises
    ------
    FloatingPointError
        If the objective is not finite at the initial value.
    LineSearchFailure
        For the ``"gd"`` method when no decrease is found.
    """
    t0 = time.perf_counter()
    if init is None:
        init = default_init(data, likelihood)
    obj = _Objective(data, init, backend)
    x0 = init.pack()
    f0, g0 = obj(x0)
    if not np.isfinite(f0):
        raise FloatingPointError("negative log-likelihood is not finite at the initial parameters")
    trace = [f0]

    if config.method == "lbfgs":
        res = _fit_lbfgs(obj, x0, config, trace)
    elif config.method == "gd":
        res = _fit_gd(obj, x0, config, trace)
    elif config.method == "fisher":
        res = _fit_fisher(obj, x0, config, trace)
    else:
        raise ValueError(f"unknown optimizer {config.method!r}")
    x, iters, reason, converged = res
    final = obj.bundle(x)
    out = FitResult(
        params=init.unpack(x),
        nll=final.value,
        nll_trace=trace,
        iterations=iters,
        reason=reason,
        converged=converged,
        backend=backend,
        n_evals=obj.n_evals,
        runtime=time.perf_counter() - t0,
        mode_b=None if final.mode is None else final.mode.b,
        diagnostics={k: v for k, v in final.diagnostics.items() if k != "cg_iterations"},
    )
    if compute_std_errors and out.params.likelihood == "gaussian":
        out.fisher, out.std_errors = std_errors(out, data, return_fisher=True)
    return out


def _fit_lbfgs(obj, x0, config, trace):
    def cb(xk):
        trace.append(obj.bundle(xk).value)

    res = so.minimize(
        obj,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=cb,
        options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": config.ftol, "maxcor": 20},
    )
    msg = res.message if isinstance(res.message, str) else res.message.decode()
    # an abnormal line search termination means the (noisy) gradient no
    # longer gives descent; treat it as convergence to noise level
    converged = bool(res.success) or "ABNORMAL" in msg
    return res.x, int(res.nit), msg, converged


def _fit_gd(obj, x, config, trace):
    f, g = obj(x)
    step = 1.0 / max(np.linalg.norm(g), 1.0)
    for it in range(1, config.max_iter + 1):
        if np.max(np.abs(g)) <= config.gtol:
            return x, it - 1, "gradient tolerance", True
        gg = float(g @ g)
        for _ in range(config.max_halvings):
            xn = x - step * g
            fn, gn = obj(xn)
            if np.isfinite(fn) and fn <= f - config.armijo * step * gg:
                break
            step *= 0.5
        else:
            raise LineSearchFailure(f"no decrease after {config.max_halvings} halvings at iteration {it}")
        rel = abs(f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        trace.append(f)
        step *= 2.0
        if rel <= config.ftol:
            return x, it, "relative change tolerance", True
    return x, config.max_iter, "maximum iterations", False


def _fit_fisher(obj, x, config, trace):
    data, template, backend = obj.data, obj.template, obj.backend
    if template.likelihood != "gaussian":
        raise ValueError("Fisher scoring is available for Gaussian likelihoods only")
    K = data.K
    f, g = obj(x)
    for it in range(1, config.max_iter + 1):
        params = template.unpack(x)
        nat = np.concatenate([params.theta, [params.sigma2]])
        # gradient in natural variances from the log-scale gradient
        g_nat = g[: K + 1] / nat
        info = fisher_information(data, params, backend, include_error_variance=True)
        try:
            delta = np.linalg.solve(info, -g_nat)
        except np.linalg.LinAlgError:
            return x, it - 1, "singular Fisher information", False
        beta = _gls_beta(data, params, backend)
        lam = 1.0
        for _ in range(config.max_halvings):
            new_nat = nat + lam * delta
            if np.all(new_nat > 0):
                xn = np.concatenate([np.log(new_nat), beta])
                fn, gn = obj(xn)
                if np.isfinite(fn) and fn <= f + 1e-12 * abs(f):
                    break
            lam *= 0.5
        else:
            return x, it - 1, "no decrease along Fisher direction", False
        rel = abs(f - fn) / max(abs(f), abs(fn), 1.0)
        x, f, g = xn, fn, gn
        trace.append(f)
        if rel <= config.ftol or np.max(np.abs(g)) <= config.gtol:
            return x, it, "relative change tolerance", True
    return x, config.max_iter, "maximum iterations", False


def _gls_beta(data, params, backend):
    w = np.full(data.n, 1.0 / params.sigma2)
    M = normal_matrix(data, params, w)
    rhs = np.column_stack([data.X, data.y])
    if backend.kind == "cholesky":
        from krylovgmm.oracle import DenseFactor

        F = DenseFactor.of(M, backend.oracle_cap)
        sol = w[:, None] * rhs - w[:, None] * data.Z.matvec(F.solve(data.Z.rmatvec(w[:, None] * rhs)))
    else:
        P = _precond(M, backend)
        sol = psi_solve(data.Z, M, P, rhs, tol=backend.cg_tol_pred, max_iter=backend.max_iter)
    A = data.X.T @ sol[:, : data.p]
    return np.linalg.solve(A, data.X.T @ sol[:, data.p])


def _precond(M, backend):
    try:
        return build_preconditioner(backend.preconditioner, M, rank=backend.rank, seed=backend.seed)
    except ZICBreakdown:
        return build_preconditioner("ssor", M)


def fisher_information(
    data: GroupedDesign, params: ModelParams, backend: Backend = Backend(), include_error_variance: bool = True
) -> NDArray:
    """Fisher information of the Gaussian variances (natural scale), symmetrized."""
    if backend.kind == "cholesky":
        return chol_fisher(data, params, include_error_variance, cap=backend.oracle_cap)
    w = np.full(data.n, 1.0 / params.sigma2)
    M = normal_matrix(data, params, w)
    P = _precond(M, backend)
    probes = ProbeSet(t=backend.t, seed=backend.seed, kind="gaussian", stream=1)
    info, _ = ste_fisher_information(
        data.Z, M, P, probes, tol=backend.cg_tol, max_iter=backend.max_iter,
        include_error_variance=include_error_variance,
    )
    return 0.5 * (info + info.T)


def std_errors(
    fit_result: FitResult,
    data: GroupedDesign,
    include_error_variance: bool = True,
    return_fisher: bool = False,
):
    """Asymptotic standard errors ``sqrt(diag(I^{-1}))`` of the variance parameters.

    Returns NaNs (with a warning) when the estimated Fisher information
    is singular.
    """
    params = fit_result.params
    if params.likelihood != "gaussian":
        raise ValueError("standard errors from the Fisher information need a Gaussian likelihood")
    info = fisher_information(data, params, fit_result.backend, include_error_variance)
    try:
        if np.linalg.cond(info) > 1e12:
            raise np.linalg.LinAlgError("Fisher information is numerically singular")
        cov = np.linalg.inv(info)
        if np.any(np.diag(cov) <= 0):
            raise np.linalg.LinAlgError("Fisher information is not positive definite")
        se = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError as exc:
        warnings.warn(f"no standard errors: {exc}", RuntimeWarning, stacklevel=2)
        se = np.full(info.shape[0], np.nan)
    return (info, se) if return_fisher else se
