"""Response distributions: log-density and derivatives in the linear predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

__all__ = ["DerivStack", "GaussianLikelihood", "BernoulliLogit", "Likelihood", "eval_derivs", "make_likelihood"]


@dataclass(frozen=True)
class DerivStack:
    """``log p(y | mu)`` and its first three elementwise derivatives in ``mu``."""

    logp: float
    d1: NDArray[np.float64]
    d2: NDArray[np.float64]
    d3: NDArray[np.float64]

    @property
    def w(self) -> NDArray[np.float64]:
        """Diagonal of ``W = -d^2 log p / d mu^2``."""
        return -self.d2


@dataclass(frozen=True)
class GaussianLikelihood:
    """Gaussian response with identity link and error variance ``sigma2``."""

    sigma2: float = 1.0
    name = "gaussian"
    n_aux = 1

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("error variance must be positive")

    def validate(self, y: NDArray) -> None:
        if not np.all(np.isfinite(y)):
            raise ValueError("Gaussian responses must be finite")

    def with_aux(self, log_aux: ArrayLike) -> "GaussianLikelihood":
        return GaussianLikelihood(float(np.exp(np.asarray(log_aux).ravel()[0])))

    @property
    def log_aux(self) -> NDArray:
        return np.array([np.log(self.sigma2)])

    def logp(self, y: NDArray, mu: NDArray) -> float:
        r = y - mu
        return float(-0.5 * y.size * np.log(2 * np.pi * self.sigma2) - 0.5 * r @ r / self.sigma2)

    def derivs(self, y: NDArray, mu: NDArray) -> DerivStack:
        r = y - mu
        n = y.size
        return DerivStack(
            logp=float(-0.5 * n * np.log(2 * np.pi * self.sigma2) - 0.5 * r @ r / self.sigma2),
            d1=r / self.sigma2,
            d2=np.full(n, -1.0 / self.sigma2),
            d3=np.zeros(n),
        )

    def aux_derivs(self, y: NDArray, mu: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        """Derivatives in ``log sigma2``: (d logp, d d1, d W), each with a leading aux axis."""
        r = y - mu
        s2 = self.sigma2
        dlogp = np.array([-0.5 * y.size + 0.5 * r @ r / s2])
        dd1 = (-r / s2)[None, :]
        dw = np.full((1, y.size), -1.0 / s2)
        return dlogp, dd1, dw


@dataclass(frozen=True)
class BernoulliLogit:
    """Binary response with logit link."""

    name = "bernoulli"
    n_aux = 0

    def validate(self, y: NDArray) -> None:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli responses must be 0 or 1")

    def with_aux(self, log_aux: ArrayLike) -> "BernoulliLogit":
        return self

    @property
    def log_aux(self) -> NDArray:
        return np.zeros(0)

    def logp(self, y: NDArray, mu: NDArray) -> float:
        return float(y @ mu - np.logaddexp(0.0, mu).sum())

    def derivs(self, y: NDArray, mu: NDArray) -> DerivStack:
        p = expit(mu)
        pq = p * (1.0 - p)
        return DerivStack(
            logp=float(y @ mu - np.logaddexp(0.0, mu).sum()),
            d1=y - p,
            d2=-pq,
            d3=-pq * (1.0 - 2.0 * p),
        )

    def aux_derivs(self, y, mu):
        n = y.size
        return np.zeros(0), np.zeros((0, n)), np.zeros((0, n))


Likelihood = GaussianLikelihood | BernoulliLogit


def make_likelihood(kind: str, sigma2: float = 1.0) -> Likelihood:
    kind = kind.lower()
    if kind in ("gaussian", "normal"):
        return GaussianLikelihood(sigma2)
    if kind in ("bernoulli", "bernoulli_logit", "binary", "logit"):
        return BernoulliLogit()
    raise ValueError(f"unknown likelihood {kind!r}")


def eval_derivs(lik: Likelihood, y: ArrayLike, mu: ArrayLike) -> DerivStack:
    """Log-density and its derivatives with respect to ``mu``.

    Raises ``ValueError`` for responses outside the likelihood's support.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise ValueError(f"y has shape {y.shape} but mu has shape {mu.shape}")
    lik.validate(y)
    return lik.derivs(y, mu)
