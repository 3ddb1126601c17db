from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from krylovgmm.inference import GroupedDesign, ModelParams
from krylovgmm.simgen import SimConfig, simulate_dataset

settings.register_profile(
    "repo", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def crossed_design(n: int, m: tuple[int, ...], seed: int = 0, likelihood: str = "gaussian",
                   design: str = "unbalanced", theta=None, n_test: int = 0):
    """Simulated crossed data and the true parameters."""
    theta = tuple(theta or [0.25] * len(m))
    cfg = SimConfig(n=n, m=m, theta=theta, likelihood=likelihood, design=design, seed=seed, n_test=n_test)
    sim = simulate_dataset(cfg)
    if likelihood == "gaussian":
        params = ModelParams.gaussian(theta, 0.25, cfg.coefficients)
    else:
        params = ModelParams.bernoulli(theta, cfg.coefficients)
    return sim, params


@pytest.fixture(scope="session")
def gaussian_small():
    sim, params = crossed_design(400, (30, 20), seed=11)
    return sim.train, params


@pytest.fixture(scope="session")
def bernoulli_small():
    sim, params = crossed_design(600, (30, 20), seed=12, likelihood="bernoulli")
    return sim.train, params


def one_factor(y, levels) -> GroupedDesign:
    return GroupedDesign.from_arrays(y, None, [levels], intercept=False)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
