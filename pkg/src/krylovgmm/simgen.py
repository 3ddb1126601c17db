"""Synthetic crossed random effects data.

The default configuration has two crossed grouping factors with variances
0.25, five standard covariates plus an intercept with coefficients
``(0, 1, 1, 1, 1, 1)``, covariate variance chosen so that the fixed-effect
variance equals the total random-effect variance, and either Gaussian
responses (error variance 0.25) or Bernoulli responses with a logit link.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.special import expit

from krylovgmm.inference import GroupedDesign

__all__ = [
    "SimConfig",
    "SimData",
    "simulate_dataset",
    "balanced_labels",
    "biregular_labels",
    "evaluate_predictions",
    "log_score",
]

DESIGNS = ("balanced", "biregular", "unbalanced")


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``n`` training rows plus ``n_test`` test rows are drawn jointly and then
    split uniformly at random. ``design`` is

    * ``"balanced"``: every level of factor ``k`` occurs exactly
      ``(n + n_test) / m_k`` times (random permutation blocks),
    * ``"biregular"``: balanced with every pair of levels of the two
      factors co-occurring at most once (K = 2 only),
    * ``"unbalanced"``: levels drawn uniformly at random; the customary
      setting uses ``m = (m_1, m_1 // 2)``.

    ``effects_seed``, when given, draws the random effects from their own
    generator so that replications can share them across designs of
    different size (common random numbers).
    """

    n: int = 1000
    m: tuple[int, ...] = (100, 100)
    theta: tuple[float, ...] = (0.25, 0.25)
    sigma2: float = 0.25
    likelihood: str = "gaussian"
    n_cov: int = 5
    design: str = "balanced"
    n_test: int = 0
    seed: int = 0
    beta: tuple[float, ...] | None = None
    effects_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(v) for v in np.atleast_1d(self.m)))
        object.__setattr__(self, "theta", tuple(float(v) for v in np.atleast_1d(self.theta)))
        if len(self.m) != len(self.theta):
            raise ValueError("need one variance per grouping factor")
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}")
        if self.likelihood not in ("gaussian", "bernoulli"):
            raise ValueError("likelihood must be 'gaussian' or 'bernoulli'")
        if self.n < 1 or self.n_test < 0:
            raise ValueError("need n >= 1 and n_test >= 0")
        if any(t < 0 for t in self.theta):
            raise ValueError("variances must be nonnegative")
        N = self.n + self.n_test
        if self.design in ("balanced", "biregular"):
            bad = [mk for mk in self.m if N % mk]
            if bad:
                raise ValueError(f"balanced design needs m_k to divide n + n_test = {N}; fails for {bad}")
        if self.design == "biregular":
            if len(self.m) != 2:
                raise ValueError("biregular designs need exactly two factors")
            if N // self.m[0] > self.m[1] or N // self.m[1] > self.m[0]:
                raise ValueError("biregular design infeasible: a level would need repeated partners")

    @property
    def K(self) -> int:
        return len(self.m)

    @property
    def coefficients(self) -> NDArray:
        if self.beta is not None:
            return np.asarray(self.beta, dtype=float)
        return np.concatenate([[0.0], np.ones(self.n_cov)])

    @property
    def covariate_variance(self) -> float:
        """Per-covariate variance making ``var(X beta)`` equal ``sum(theta)``."""
        slopes = self.coefficients[1:]
        ss = float(slopes @ slopes)
        return sum(self.theta) / ss if ss > 0 else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimData:
    """A simulated data set with its ground truth."""

    config: SimConfig
    train: GroupedDesign
    labels_train: list[NDArray]
    labels_test: list[NDArray]
    X_test: NDArray
    y_test: NDArray
    b: list[NDArray]
    re_train: NDArray
    re_test: NDArray
    train_rows: NDArray
    test_rows: NDArray
    extras: dict = field(default_factory=dict)

    def frame(self, which: str = "train") -> pd.DataFrame:
        """Data as a table with columns ``y, x1..xp, g1..gK``."""
        if which == "train":
            X, y, labs = self.train.X[:, 1:], self.train.y, self.labels_train
        else:
            X, y, labs = self.X_test[:, 1:], self.y_test, self.labels_test
        cols = {"y": y}
        for j in range(X.shape[1]):
            cols[f"x{j + 1}"] = X[:, j]
        for k, lab in enumerate(labs):
            cols[f"g{k + 1}"] = lab
        return pd.DataFrame(cols)

    def truth(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "beta": self.config.coefficients.tolist(),
            "theta": list(self.config.theta),
            "sigma2": self.config.sigma2 if self.config.likelihood == "gaussian" else None,
            "b": [bk.tolist() for bk in self.b],
        }


def balanced_labels(rng: np.random.Generator, N: int, m: int) -> NDArray:
    """Each of ``m`` levels exactly ``N / m`` times in random order."""
    return rng.permutation(np.repeat(np.arange(m), N // m))


def biregular_labels(rng: np.random.Generator, N: int, m1: int, m2: int, max_sweeps: int = 1000) -> tuple[NDArray, NDArray]:
    """Bipartite biregular design without repeated level pairs.

    Draws a configuration-model pairing of the ``N`` edge stubs and then
    removes repeated pairs by random swaps of second-factor endpoints that
    create no new repeats.
    """
    g1 = np.repeat(np.arange(m1), N // m1)
    g2 = rng.permutation(np.repeat(np.arange(m2), N // m2))
    key = g1.astype(np.int64) * m2 + g2
    for _ in range(max_sweeps):
        _, first, counts = np.unique(key, return_index=True, return_counts=True)
        dup_mask = np.ones(N, dtype=bool)
        dup_mask[first] = False
        dups = np.flatnonzero(dup_mask)
        if dups.size == 0:
            return g1, g2
        present = set(key.tolist())
        for e in rng.permutation(dups):
            for _try in range(100):
                f = int(rng.integers(N))
                a1, a2 = g1[e], g2[e]
                c1, c2 = g1[f], g2[f]
                k_new_e = a1 * m2 + c2
                k_new_f = c1 * m2 + a2
                if a1 == c1 or a2 == c2 or k_new_e in present or k_new_f in present:
                    continue
                # key[e] stays present if another edge still carries it
                present.discard(int(key[f]))
                g2[e], g2[f] = c2, a2
                key[e], key[f] = k_new_e, k_new_f
                present.add(int(k_new_e))
                present.add(int(k_new_f))
                break
    raise RuntimeError("could not remove repeated level pairs")


def simulate_dataset(cfg: SimConfig) -> SimData:
    """Draw one data set; deterministic for a given configuration and seed."""
    rng = np.random.default_rng(cfg.seed)
    N = cfg.n + cfg.n_test
    if cfg.design == "balanced":
        labels = [balanced_labels(rng, N, mk) for mk in cfg.m]
    elif cfg.design == "biregular":
        g1, g2 = biregular_labels(rng, N, cfg.m[0], cfg.m[1])
        perm = rng.permutation(N)
        labels = [g1[perm], g2[perm]]
    else:
        labels = [rng.integers(0, mk, size=N) for mk in cfg.m]
    rng_b = rng if cfg.effects_seed is None else np.random.default_rng(cfg.effects_seed)
    b = [rng_b.normal(0.0, np.sqrt(th), size=mk) for th, mk in zip(cfg.theta, cfg.m)]
    X = np.column_stack([np.ones(N), rng.normal(0.0, np.sqrt(cfg.covariate_variance), size=(N, cfg.n_cov))])
    re = np.zeros(N)
    for lab, bk in zip(labels, b):
        re += bk[lab]
    eta = X @ cfg.coefficients + re
    if cfg.likelihood == "gaussian":
        y = eta + rng.normal(0.0, np.sqrt(cfg.sigma2), size=N)
    else:
        y = (rng.random(N) < expit(eta)).astype(float)
    if cfg.n_test:
        perm = rng.permutation(N)
        train_rows, test_rows = np.sort(perm[: cfg.n]), np.sort(perm[cfg.n:])
    else:
        train_rows, test_rows = np.arange(N), np.arange(0)
    names = [f"g{k + 1}" for k in range(cfg.K)]
    train = GroupedDesign.from_arrays(
        y[train_rows], X[train_rows, 1:], [lab[train_rows] for lab in labels], names, intercept=True
    )
    train.covariate_names = ("intercept",) + tuple(f"x{j + 1}" for j in range(cfg.n_cov))
    return SimData(
        config=cfg,
        train=train,
        labels_train=[lab[train_rows] for lab in labels],
        labels_test=[lab[test_rows] for lab in labels],
        X_test=X[test_rows],
        y_test=y[test_rows],
        b=b,
        re_train=re[train_rows],
        re_test=re[test_rows],
        train_rows=train_rows,
        test_rows=test_rows,
    )


def log_score(truth: NDArray, mean: NDArray, var: NDArray) -> float:
    """``-(1/n) sum log N(truth_i; mean_i, var_i)``; infinite if a zero variance misses."""
    truth, mean, var = (np.asarray(a, dtype=float) for a in (truth, mean, var))
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = (truth - mean) ** 2
        terms = np.where(var > 0, 0.5 * np.log(2 * np.pi * var) + 0.5 * r2 / np.where(var > 0, var, 1.0),
                         np.where(r2 == 0, -np.inf, np.inf))
    return float(terms.mean())


def evaluate_predictions(truth_re: NDArray, dist) -> tuple[float, float]:
    """RMSE and log score of predicted random effects ``Z_po b + Z_pp b_p``.

    ``dist`` is a :class:`~krylovgmm.prediction.PredictiveDist`; its
    random-effect means and latent variances are compared with
    ``truth_re``.
    """
    truth_re = np.asarray(truth_re, dtype=float)
    mean = dist.re_mean
    rmse = float(np.sqrt(np.mean((truth_re - mean) ** 2)))
    return rmse, log_score(truth_re, mean, dist.var)
