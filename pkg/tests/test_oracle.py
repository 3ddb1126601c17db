from __future__ import annotations

import numpy as np
import pytest
from conftest import crossed_design, one_factor

from krylovgmm.inference import ModelParams
from krylovgmm.oracle import (
    DenseFactor,
    OracleCapExceeded,
    chol_fisher,
    chol_nll,
    chol_predict,
    naive_gaussian_nll,
)
from krylovgmm.prediction import FittedModel, PredictionSpec


def _naive_fisher(data, params):
    Zd = data.Z.csr.toarray()
    sig = params.sigma_diag(data.Z.offsets)
    Psi = (Zd * sig) @ Zd.T + params.sigma2 * np.eye(data.n)
    Pinv = np.linalg.inv(Psi)
    off = data.Z.offsets
    dP = [Zd[:, off[k]:off[k + 1]] @ Zd[:, off[k]:off[k + 1]].T for k in range(data.K)] + [np.eye(data.n)]
    return np.array([[0.5 * np.trace(Pinv @ a @ Pinv @ b) for b in dP] for a in dP])


class TestDenseFactor:
    def test_reconstruction(self, gaussian_small):
        from krylovgmm.inference import normal_matrix

        data, params = gaussian_small
        M = normal_matrix(data, params, np.full(data.n, 4.0))
        F = DenseFactor.of(M)
        A = M.dense()
        assert np.linalg.norm(F.lower @ F.lower.T - A) <= 1e-10 * np.linalg.norm(A)
        Zd = data.Z.csr.toarray()
        np.testing.assert_allclose(F.diag_zinvz(data.Z), np.diag(Zd @ np.linalg.inv(A) @ Zd.T), atol=1e-12)
        assert F.logdet == pytest.approx(np.linalg.slogdet(A)[1], abs=1e-10)

    def test_cap(self):
        with pytest.raises(OracleCapExceeded):
            DenseFactor.of(np.eye(11), cap=10)


class TestCholNLL:
    def test_scalar(self):
        out = chol_nll(one_factor([0.0], ["a"]), ModelParams.gaussian([1.0], 1.0, []))
        assert out.value == pytest.approx(1.26551, abs=1e-5)

    def test_naive_dense(self):
        sim, params = crossed_design(400, (40, 20), seed=8)
        assert chol_nll(sim.train, params, need_grad=False).value == pytest.approx(
            naive_gaussian_nll(sim.train, params), abs=1e-8)

    def test_cap_enforced(self, gaussian_small):
        data, params = gaussian_small
        with pytest.raises(OracleCapExceeded):
            chol_nll(data, params, cap=10)


class TestCholPredict:
    def test_new_levels_only(self, gaussian_small):
        data, params = gaussian_small
        spec = PredictionSpec.from_labels(data, [["u", "v"], ["w", "w"]], np.zeros((2, 5)), params.theta)
        dist = chol_predict(spec, FittedModel(data, params))
        np.testing.assert_allclose(dist.var, params.theta.sum(), atol=1e-14)

    def test_scalar_posterior(self):
        d, s1, s2 = 5, 0.3, 0.6
        data = one_factor(np.ones(d), np.zeros(d, dtype=int))
        spec = PredictionSpec.from_labels(data, [[0]], None, [s1], intercept=False)
        dist = chol_predict(spec, FittedModel(data, ModelParams.gaussian([s1], s2, [])))
        assert dist.var[0] == pytest.approx(s1 * s2 / (s2 + d * s1), abs=1e-14)


class TestCholFisher:
    def test_matches_naive(self):
        sim, params = crossed_design(300, (25, 15), seed=9)
        np.testing.assert_allclose(chol_fisher(sim.train, params, include_error_variance=True),
                                   _naive_fisher(sim.train, params), rtol=1e-8)

    def test_rejects_bernoulli(self, bernoulli_small):
        data, params = bernoulli_small
        with pytest.raises(ValueError):
            chol_fisher(data, params)
