"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (also collected into the
terminal summary) and then asserts the verdict.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from krylovgmm.inference import Backend, ModelParams, nll
from krylovgmm.optimizer import fit
from krylovgmm.oracle import OracleCapExceeded, chol_nll
from krylovgmm.prediction import (
    FittedModel,
    PredictionSpec,
    predict,
    predict_cov_sim_normal,
    predict_cov_sim_psi,
    predict_var_stochastic_diag,
)
from krylovgmm.simgen import SimConfig, evaluate_predictions, simulate_dataset
from krylovgmm.sparse_core import assemble_normal_matrix
from krylovgmm.spectral import design_info, preconditioned_spectrum

CHOL = Backend(kind="cholesky")


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def simulate(n, m, seed, likelihood="gaussian", **kw):
    cfg = SimConfig(n=n, m=m, seed=seed, likelihood=likelihood, **kw)
    sim = simulate_dataset(cfg)
    if likelihood == "gaussian":
        params = ModelParams.gaussian(cfg.theta, cfg.sigma2, cfg.coefficients)
    else:
        params = ModelParams.bernoulli(cfg.theta, cfg.coefficients)
    return sim, params


def spec_for(sim, theta) -> PredictionSpec:
    return PredictionSpec.from_labels(sim.train, sim.labels_test, sim.X_test[:, 1:], theta)


def gaussian_normal_matrix(data, theta, s2):
    Z = data.Z
    w = np.full(data.n, 1.0 / s2)
    M = assemble_normal_matrix(Z, w, 1.0 / np.repeat(theta, np.diff(Z.offsets)))
    return M, design_info(Z, w, theta, s2)


def test_criterion_01_oracle_nll_equivalence():
    sim, params = simulate(20_000, (1000, 1000), seed=101)
    ref = nll(sim.train, params, CHOL, need_grad=False).value
    be = Backend(preconditioner="ssor", t=50, seed=1)
    nll(sim.train, params, be, need_grad=False)  # compile kernels before timing
    t0 = time.perf_counter()
    est = nll(sim.train, params, be.with_(seed=2), need_grad=False).value
    elapsed = time.perf_counter() - t0
    rel = abs(est - ref) / abs(ref)
    verdict(1, rel <= 1e-3 and elapsed < 10.0, f"relative error {rel:.2e} (<= 1e-3), krylov time {elapsed:.2f}s (< 10s)")


@pytest.mark.parametrize("likelihood", ["gaussian", "bernoulli"])
def test_criterion_02_preconditioner_variance_ordering(likelihood):
    sim, params = simulate(20_000, (1000, 1000), seed=102, likelihood=likelihood)
    sd = {}
    for kind in ("ssor", "zic", "diagonal"):
        vals = [nll(sim.train, params, Backend(preconditioner=kind, seed=r), need_grad=False).value for r in range(30)]
        sd[kind] = float(np.std(vals, ddof=1))
    ok = sd["ssor"] < sd["diagonal"] and sd["zic"] < sd["diagonal"]
    detail = ", ".join(f"sd({k})={v:.4g}" for k, v in sd.items())
    verdict(2, ok, f"{likelihood}: {detail}")


def test_criterion_03_spectral_closed_forms():
    d, m1 = 10, 100
    sim, _ = simulate(d * m1, (m1, m1), seed=103, theta=(0.25, 0.25), sigma2=0.25)
    M, info = gaussian_normal_matrix(sim.train, np.array([0.25, 0.25]), 0.25)
    ssor = preconditioned_spectrum(M, "ssor", info)
    diag = preconditioned_spectrum(M, "diagonal", info)
    r = d / (d + 1)
    errs = {
        "lmax_ssor": abs(ssor.lambda_max - 1.0),
        "lmin_ssor": abs(ssor.lambda_min - (1 - r**2)),
        "lmax_diag": abs(diag.lambda_max - (1 + r)),
        "lmin_diag": abs(diag.lambda_min - (1 - r)),
        "kappa_diag": abs(diag.kappa - 21.0),
    }
    mult = int(np.sum(np.abs(ssor.eigenvalues - 1.0) <= 1e-8))
    ok = max(errs.values()) <= 1e-8 and mult >= m1
    verdict(3, ok, f"max deviation {max(errs.values()):.1e} (<= 1e-8), multiplicity of 1: {mult} (>= {m1})")


def test_criterion_04_biregular_scaling():
    kappa = {}
    for d in (4, 16, 64):
        sim, _ = simulate(500 * d, (500, 500), seed=104 + d, design="biregular")
        M, info = gaussian_normal_matrix(sim.train, np.array([0.25, 0.25]), 0.25)
        assert info.biregular
        kappa[d] = (
            preconditioned_spectrum(M, "ssor", info).kappa_eff(1, 1) - 1,
            preconditioned_spectrum(M, "diagonal", info).kappa_eff(1, 2) - 1,
        )
    r_ssor = [kappa[4][0] / kappa[16][0], kappa[16][0] / kappa[64][0]]
    r_diag = [kappa[4][1] / kappa[16][1], kappa[16][1] / kappa[64][1]]
    ok = all(2.5 <= r <= 6 for r in r_ssor) and all(1.4 <= r <= 2.8 for r in r_diag)
    verdict(
        4,
        ok,
        f"SSOR ratios {r_ssor[0]:.2f}, {r_ssor[1]:.2f} in [2.5, 6]; "
        f"diagonal ratios {r_diag[0]:.2f}, {r_diag[1]:.2f} in [1.4, 2.8]",
    )


def _central_differences(f, x, rel=1e-4):
    g = np.empty_like(x)
    for i in range(x.size):
        h = rel * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("likelihood", ["gaussian", "bernoulli"])
def test_criterion_05_gradient_correctness(likelihood):
    sim, params = simulate(500, (25, 25), seed=105, likelihood=likelihood)
    data = sim.train
    params = params.unpack(params.pack() + 0.3)  # away from the truth so no gradient entry is tiny
    worst = {}
    for name, be in (("cholesky", CHOL), ("krylov", Backend(t=2000, seed=1, cg_tol=1e-10, cg_tol_mode=1e-12))):
        g = nll(data, params, be).grad
        fd = _central_differences(lambda x: nll(data, params.unpack(x), be, need_grad=False).value, params.pack())
        worst[name] = float(np.max(np.abs(g - fd) / np.abs(fd)))
    ok = worst["cholesky"] <= 1e-4 and worst["krylov"] <= 1e-3
    verdict(
        5,
        ok,
        f"{likelihood}: cholesky max relative error {worst['cholesky']:.1e} (<= 1e-4), "
        f"krylov STE vs SAA differences {worst['krylov']:.1e} (<= 1e-3)",
    )


@pytest.fixture(scope="module")
def prediction_problem():
    sim, params = simulate(5000, (250, 250), seed=106, n_test=1000)
    spec = spec_for(sim, params.theta)
    model = FittedModel(sim.train, params, Backend())
    ref = predict(spec, model, method="cholesky").var
    return spec, model, ref


def test_criterion_06_predictive_variance_unbiasedness(prediction_problem):
    spec, model, ref = prediction_problem
    s, reps = 100, 200
    estimators = {
        "alg1": lambda r: predict_var_stochastic_diag(spec, model, s=s, seed=r)[0],
        "alg2": lambda r: predict_cov_sim_normal(spec, model, s=s, seed=r)[0],
        # the diagonal of the full matrix is the raw estimate, before clamping
        "alg3": lambda r: np.diag(predict_cov_sim_psi(spec, model, s=s, seed=r, diag_only=False)[1]),
    }
    rates = {}
    for name, est in estimators.items():
        V = np.array([est(r) for r in range(reps)])
        se = V.std(axis=0, ddof=1) / np.sqrt(reps)
        rates[name] = float(np.mean(np.abs(V.mean(axis=0) - ref) > 3 * se))
    rmse = {}
    for s_ in (125, 500):
        rmse[s_] = np.mean(
            [np.sqrt(np.mean((predict_var_stochastic_diag(spec, model, s=s_, seed=10_000 + r)[0] - ref) ** 2))
             for r in range(50)]
        )
    ratio = rmse[125] / rmse[500]
    ok = max(rates.values()) <= 0.01 and 1.5 <= ratio <= 2.5
    detail = ", ".join(f"{k} failure rate {v:.3f}" for k, v in rates.items())
    verdict(6, ok, f"{detail} (<= 0.01); alg1 RMSE ratio s=125/s=500 {ratio:.2f} (2 +- 25%)")


def test_criterion_07_method_ranking():
    sim, params = simulate(10_000, (1000, 1000), seed=107, n_test=10_000)
    spec = spec_for(sim, params.theta)
    model = FittedModel(sim.train, params, Backend())
    ref = predict(spec, model, method="cholesky").var

    def run(method, seed=0, **kw):
        t0 = time.perf_counter()
        var = predict(spec, model, method=method, seed=seed, **kw).var
        return time.perf_counter() - t0, float(np.sqrt(np.mean((var - ref) ** 2)))

    for method in ("alg1", "alg2", "alg3"):
        run(method, s=4)  # compile kernels before timing
    budget = np.median([run("alg1", s=500, seed=r)[0] for r in range(3)])
    rmse = {}
    for method in ("alg1", "alg2", "alg3"):
        per_sample = np.median([run(method, s=100, seed=r)[0] for r in range(3)]) / 100
        s = 500 if method == "alg1" else max(2, int(budget / per_sample))
        rmse[method] = np.mean([run(method, s=s, seed=100 + r)[1] for r in range(3)])
    lanczos = []
    for k in (10, 50, 100):
        t, err = run("lanczos", k=k)
        if t <= budget:
            lanczos.append(err)
    rmse["lanczos"] = min(lanczos)
    order = ["alg1", "alg2", "alg3", "lanczos"]
    ok = len(lanczos) == 3 and all(rmse[a] < rmse[b] for a, b in zip(order, order[1:]))
    detail = " < ".join(f"{k} {rmse[k]:.2e}" for k in order)
    verdict(7, ok, f"budget {budget:.2f}s: {detail}")


def test_criterion_08_estimation_recovery():
    reps = 100
    t0 = time.perf_counter()
    est = []
    for r in range(reps):
        sim, _ = simulate(40_000, (2000, 2000), seed=80_000 + r)
        est.append(fit(sim.train, backend=Backend(seed=r)).params.theta[0])
    runtime = time.perf_counter() - t0
    err = np.asarray(est) - 0.25
    rmse, bias = float(np.sqrt(np.mean(err**2))), float(err.mean())
    lo, hi = 0.6 * 8.97e-3, 1.5 * 8.97e-3
    ok = lo <= rmse <= hi and abs(bias) <= 2e-3 and runtime <= 7200
    verdict(
        8,
        ok,
        f"{reps} replications: RMSE {rmse:.2e} in [{lo:.2e}, {hi:.2e}], "
        f"bias {bias:.1e} (|.| <= 2e-3), runtime {runtime:.0f}s (<= 7200s)",
    )


def test_criterion_09_laplace_bias_shape():
    reps = 100
    means = {}
    for d in (5, 20, 80):
        est = []
        for r in range(reps):
            # replication r shares its random effects across d
            sim, _ = simulate(200 * d, (200, 200), seed=90_000 + 1000 * d + r, likelihood="bernoulli", effects_seed=r)
            est.append(fit(sim.train, backend=Backend(seed=r), likelihood="bernoulli").params.theta[0])
        means[d] = float(np.mean(est))
    vals = [means[d] for d in (5, 20, 80)]
    ok = all(v < 0.25 for v in vals) and vals[0] < vals[1] < vals[2]
    verdict(9, ok, f"{reps} reps, mean estimate d=5: {vals[0]:.4f}, d=20: {vals[1]:.4f}, d=80: {vals[2]:.4f}")


def test_criterion_10_backend_interchangeability():
    worst = np.zeros(3)
    for r in range(20):
        sim, _ = simulate(10_000, (500, 500), seed=100_000 + r, n_test=10_000)
        out = []
        for be, method in ((CHOL, "cholesky"), (Backend(seed=r), "alg1")):
            res = fit(sim.train, backend=be)
            p = res.params
            dist = predict(spec_for(sim, p.theta), FittedModel.from_fit(res, sim.train), method=method, seed=r)
            out.append((np.concatenate([p.theta, p.aux, p.beta]), *evaluate_predictions(sim.re_test, dist)))
        diffs = [np.max(np.abs(out[0][0] - out[1][0])), abs(out[0][1] - out[1][1]), abs(out[0][2] - out[1][2])]
        worst = np.maximum(worst, diffs)
    ok = worst[0] <= 1e-2 and worst[1] <= 1e-3 and worst[2] <= 1e-2
    verdict(
        10,
        ok,
        f"20 datasets: max parameter difference {worst[0]:.1e} (<= 1e-2), "
        f"RMSE difference {worst[1]:.1e} (<= 1e-3), LS difference {worst[2]:.1e} (<= 1e-2)",
    )


def test_criterion_11_internal_speedup():
    sim, params = simulate(200_000, (10_000, 10_000), seed=111)
    be = Backend(seed=1)
    nll(sim.train, params, be, need_grad=False)
    t0 = time.perf_counter()
    nll(sim.train, params, be.with_(seed=2), need_grad=False)
    t_krylov = time.perf_counter() - t0
    with pytest.raises(OracleCapExceeded):
        chol_nll(sim.train, params, need_grad=False)
    sizes, times = [], []
    for m1 in (500, 1000, 2000):
        small, p = simulate(20 * m1, (m1, m1), seed=111 + m1)
        t0 = time.perf_counter()
        chol_nll(small.train, p, need_grad=False)
        sizes.append(2 * m1)
        times.append(time.perf_counter() - t0)
    slope, icpt = np.polyfit(np.log(sizes), np.log(times), 1)
    # fixed overheads at small m pull the fitted exponent below the cubic one, so this underestimates
    t_oracle = float(np.exp(icpt + slope * np.log(sizes[-1])) * (20_000 / sizes[-1]) ** slope)
    speedup = t_oracle / t_krylov
    verdict(
        11,
        speedup >= 10,
        f"krylov {t_krylov:.2f}s vs oracle extrapolated {t_oracle:.1f}s (exponent {slope:.2f}) "
        f"at m=20000: speedup {speedup:.0f}x (>= 10); oracle refuses m=20000 past its cap",
    )
