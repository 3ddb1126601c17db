from __future__ import annotations

import numpy as np
import pytest

from krylovgmm.prediction import PredictiveDist
from krylovgmm.simgen import SimConfig, evaluate_predictions, log_score, simulate_dataset


class TestSimulate:
    def test_balanced_counts(self):
        sim = simulate_dataset(SimConfig(n=1000, m=(100, 100), design="balanced"))
        np.testing.assert_array_equal(sim.train.Z.column_counts(), 10)

    def test_fixed_effect_variance(self):
        sim = simulate_dataset(SimConfig(n=100_000, m=(1000, 1000), seed=1))
        fx = sim.train.X @ sim.config.coefficients
        se = 0.5 * np.sqrt(2 / fx.size)
        assert abs(np.var(fx) - 0.5) <= 3 * se

    def test_random_effect_variance(self):
        sim = simulate_dataset(SimConfig(n=100_000, m=(10_000, 10_000), seed=2))
        assert abs(np.var(sim.re_train) / 0.5 - 1) <= 0.05

    def test_zero_variance_component(self):
        sim = simulate_dataset(SimConfig(n=200, m=(10, 10), theta=(0.0, 0.0), seed=3))
        np.testing.assert_array_equal(sim.re_train, 0.0)

    def test_seeded_determinism(self):
        cfg = SimConfig(n=500, m=(50, 25), design="unbalanced", n_test=100, seed=4)
        a = simulate_dataset(cfg).frame().to_csv().encode()
        b = simulate_dataset(cfg).frame().to_csv().encode()
        assert a == b
        assert a != simulate_dataset(SimConfig(n=500, m=(50, 25), design="unbalanced", n_test=100, seed=5)).frame().to_csv().encode()

    def test_biregular(self):
        sim = simulate_dataset(SimConfig(n=2000, m=(200, 200), design="biregular", seed=6))
        Z = sim.train.Z
        np.testing.assert_array_equal(Z.column_counts(), 10)
        cross = (Z.factor(0).T @ Z.factor(1)).tocsr()
        assert cross.data.max() == 1

    def test_split(self):
        sim = simulate_dataset(SimConfig(n=300, m=(10, 5), design="unbalanced", n_test=100, seed=7))
        assert sim.train.n == 300 and sim.y_test.size == 100
        assert np.intersect1d(sim.train_rows, sim.test_rows).size == 0
        assert sim.frame("test").shape == (100, 8)

    def test_bernoulli_responses(self):
        sim = simulate_dataset(SimConfig(n=500, m=(10, 10), likelihood="bernoulli", seed=8))
        assert set(np.unique(sim.train.y)) <= {0.0, 1.0}

    @pytest.mark.parametrize("kw", [dict(n=1001, m=(100, 100)), dict(m=(10,), theta=(1.0, 1.0)),
                                    dict(design="grid"), dict(design="biregular", n=1000, m=(5, 100))])
    def test_invalid_configs(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)


class TestScores:
    def test_perfect_unit_variance(self):
        assert log_score(np.zeros(3), np.zeros(3), np.ones(3)) == pytest.approx(0.5 * np.log(2 * np.pi))

    def test_zero_variance_miss_is_infinite(self):
        assert log_score(np.ones(2), np.zeros(2), np.zeros(2)) == np.inf

    def test_evaluate(self):
        dist = PredictiveDist(np.full(2, 5.0), np.ones(2), np.array([0.0, 1.0]), "x")
        rmse, ls = evaluate_predictions(np.array([0.0, 0.0]), dist)
        assert rmse == pytest.approx(np.sqrt(0.5))
        assert ls == pytest.approx(0.5 * np.log(2 * np.pi) + 0.25)


def test_effects_seed_shares_random_effects():
    a = simulate_dataset(SimConfig(n=200, m=(20, 20), seed=1, effects_seed=9))
    b = simulate_dataset(SimConfig(n=800, m=(20, 20), seed=2, effects_seed=9))
    for ba, bb in zip(a.b, b.b):
        np.testing.assert_array_equal(ba, bb)
    assert not np.array_equal(a.train.y[:200], b.train.y[:200])
