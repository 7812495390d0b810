"""Exponential-family building blocks used by the variational model.

All parameter types are *batched*: the leading axes index independent
distributions, so a single ``GammaParams`` can hold the noise precision of
every series at once.

The Wishart distribution uses the rate-style parametrisation

    p(X | nu, W) ∝ det(X)^((nu - p - 1) / 2) exp(-tr(W X) / 2),

so that ``E[X] = nu W^-1``. This mirrors the Gamma(shape, rate) convention and
makes the one-dimensional Wishart(nu, w) identical to Gamma(nu / 2, w / 2).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import special, stats

LOG_2PI = np.log(2 * np.pi)


class DistributionError(ValueError):
    """Invalid distribution parameters or an off-support argument."""


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def cholesky(matrix: np.ndarray) -> np.ndarray:
    """Batched Cholesky factor that raises :class:`DistributionError` if the
    input is not positive definite."""
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise DistributionError("matrix is not positive definite") from exc


def logdet_from_cholesky(chol: np.ndarray) -> np.ndarray:
    return 2 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def spd_inverse(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(inverse, logdet)`` of a batch of SPD matrices."""
    chol = cholesky(matrix)
    chol_inv = np.linalg.inv(chol)
    inverse = np.swapaxes(chol_inv, -1, -2) @ chol_inv
    return inverse, logdet_from_cholesky(chol)


def multigammaln(a, p: int) -> np.ndarray:
    """Log of the multivariate gamma function, vectorised over ``a``."""
    a = _as_float(a)
    j = np.arange(1, p + 1)
    return p * (p - 1) / 4 * np.log(np.pi) + special.gammaln(a[..., None] + (1 - j) / 2).sum(axis=-1)


def _rng(seed) -> np.random.Generator:
    # SeedSequence-backed PCG64: children spawned from one seed are independent.
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class GammaParams:
    """Gamma distribution with ``shape`` a and ``rate`` b (mean a / b)."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_float(self.shape))
        object.__setattr__(self, "rate", _as_float(self.rate))
        if not (np.all(self.shape > 0) and np.all(self.rate > 0)):
            raise DistributionError("gamma shape and rate must be positive")

    def mean(self) -> np.ndarray:
        return self.shape / self.rate

    def variance(self) -> np.ndarray:
        return self.shape / self.rate ** 2

    def expected_log(self) -> np.ndarray:
        return special.digamma(self.shape) - np.log(self.rate)

    def entropy(self) -> np.ndarray:
        a, b = self.shape, self.rate
        return a - np.log(b) + special.gammaln(a) + (1 - a) * special.digamma(a)

    def expected_logpdf(self, mean: np.ndarray, expected_log: np.ndarray) -> np.ndarray:
        """E[log p(v)] for a random ``v`` with the given ``E[v]`` and ``E[log v]``."""
        a, b = self.shape, self.rate
        return a * np.log(b) - special.gammaln(a) + (a - 1) * expected_log - b * mean

    def logpdf(self, x) -> np.ndarray:
        x = _as_float(x)
        if np.any(x <= 0):
            raise DistributionError("gamma support is the positive reals")
        return self.expected_logpdf(x, np.log(x))

    def sample(self, seed, count: int) -> np.ndarray:
        return _rng(seed).gamma(self.shape, 1 / self.rate, size=(count,) + self.shape.shape)


@dataclass(frozen=True, eq=False)
class WishartParams:
    """Wishart distribution with shape ``nu`` and (rate-style) scale ``W``."""

    nu: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nu", _as_float(self.nu))
        object.__setattr__(self, "scale", _as_float(self.scale))
        if self.scale.ndim < 2 or self.scale.shape[-1] != self.scale.shape[-2]:
            raise DistributionError("wishart scale must be a (batch of) square matrices")
        if np.any(self.nu <= self.dim - 1):
            raise DistributionError(f"wishart shape must exceed p - 1 = {self.dim - 1}")

    @property
    def dim(self) -> int:
        return self.scale.shape[-1]

    @cached_property
    def _scale_inverse(self) -> tuple[np.ndarray, np.ndarray]:
        return spd_inverse(self.scale)

    def mean(self) -> np.ndarray:
        return self.nu[..., None, None] * self._scale_inverse[0]

    def variance(self) -> np.ndarray:
        """Entrywise variance nu (V_ij^2 + V_ii V_jj) with V = W^-1."""
        v = self._scale_inverse[0]
        diag = np.diagonal(v, axis1=-2, axis2=-1)
        return self.nu[..., None, None] * (v ** 2 + diag[..., :, None] * diag[..., None, :])

    def expected_logdet(self) -> np.ndarray:
        p = self.dim
        d = np.arange(1, p + 1)
        psi = special.digamma((self.nu[..., None] + 1 - d) / 2).sum(axis=-1)
        return psi + p * np.log(2) - self._scale_inverse[1]

    def _log_normalizer(self) -> np.ndarray:
        p = self.dim
        return self.nu / 2 * self._scale_inverse[1] - self.nu * p / 2 * np.log(2) - multigammaln(self.nu / 2, p)

    def entropy(self) -> np.ndarray:
        p = self.dim
        return -self._log_normalizer() - (self.nu - p - 1) / 2 * self.expected_logdet() + self.nu * p / 2

    def expected_logpdf(self, mean: np.ndarray, expected_logdet: np.ndarray) -> np.ndarray:
        """E[log p(X)] given ``E[X]`` and ``E[log det X]``."""
        p = self.dim
        trace = np.einsum("...ij,...ji->...", self.scale, mean)
        return self._log_normalizer() + (self.nu - p - 1) / 2 * expected_logdet - trace / 2

    def logpdf(self, x) -> np.ndarray:
        x = _as_float(x)
        _, logdet = spd_inverse(x)
        return self.expected_logpdf(x, logdet)

    def sample(self, seed, count: int) -> np.ndarray:
        if self.nu.ndim or self.scale.ndim != 2:
            raise DistributionError("sampling is only supported for a single wishart")
        rng = _rng(seed)
        dist = stats.wishart(df=float(self.nu), scale=self._scale_inverse[0])
        draws = dist.rvs(size=count, random_state=rng)
        return np.reshape(draws, (count, self.dim, self.dim))


@dataclass(frozen=True, eq=False)
class DirichletParams:
    """Dirichlet distribution; the last axis of ``concentration`` is the simplex."""

    concentration: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "concentration", _as_float(self.concentration))
        if self.concentration.ndim < 1 or np.any(self.concentration <= 0):
            raise DistributionError("dirichlet concentrations must be positive")

    @property
    def total(self) -> np.ndarray:
        return self.concentration.sum(axis=-1)

    def mean(self) -> np.ndarray:
        return self.concentration / self.total[..., None]

    def variance(self) -> np.ndarray:
        a, total = self.concentration, self.total[..., None]
        return a * (total - a) / (total ** 2 * (total + 1))

    def expected_log(self) -> np.ndarray:
        return special.digamma(self.concentration) - special.digamma(self.total)[..., None]

    def _log_normalizer(self) -> np.ndarray:
        return special.gammaln(self.total) - special.gammaln(self.concentration).sum(axis=-1)

    def entropy(self) -> np.ndarray:
        a = self.concentration
        k = a.shape[-1]
        return (
            -self._log_normalizer()
            + (self.total - k) * special.digamma(self.total)
            - ((a - 1) * special.digamma(a)).sum(axis=-1)
        )

    def expected_logpdf(self, expected_log: np.ndarray) -> np.ndarray:
        return self._log_normalizer() + ((self.concentration - 1) * expected_log).sum(axis=-1)

    def logpdf(self, x) -> np.ndarray:
        x = _as_float(x)
        if np.any(x <= 0) or np.any(np.abs(x.sum(axis=-1) - 1) > 1e-9):
            raise DistributionError("dirichlet support is the open simplex")
        return self.expected_logpdf(np.log(x))

    def sample(self, seed, count: int) -> np.ndarray:
        if self.concentration.ndim != 1:
            raise DistributionError("sampling is only supported for a single dirichlet")
        return _rng(seed).dirichlet(self.concentration, size=count)


@dataclass(frozen=True, eq=False)
class MvNormalParams:
    """Multivariate normal parametrised by ``mean`` and ``precision``."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_float(self.mean))
        object.__setattr__(self, "precision", _as_float(self.precision))
        if self.precision.shape != self.mean.shape + self.mean.shape[-1:]:
            raise DistributionError(
                f"precision shape {self.precision.shape} does not match mean shape {self.mean.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @cached_property
    def _inverse(self) -> tuple[np.ndarray, np.ndarray]:
        return spd_inverse(self.precision)

    @property
    def covariance(self) -> np.ndarray:
        return self._inverse[0]

    @property
    def logdet_precision(self) -> np.ndarray:
        return self._inverse[1]

    @cached_property
    def second_moment(self) -> np.ndarray:
        """E[v v^T] = covariance + mean mean^T."""
        return self.covariance + self.mean[..., :, None] * self.mean[..., None, :]

    def entropy(self) -> np.ndarray:
        return self.dim / 2 * (1 + LOG_2PI) - self.logdet_precision / 2

    def logpdf(self, x) -> np.ndarray:
        x = _as_float(x)
        if not np.all(np.isfinite(x)):
            raise DistributionError("normal support is the finite reals")
        delta = x - self.mean
        quad = np.einsum("...i,...ij,...j->...", delta, self.precision, delta)
        return (self.logdet_precision - self.dim * LOG_2PI - quad) / 2

    def sample(self, seed, count: int) -> np.ndarray:
        rng = _rng(seed)
        chol = cholesky(self.covariance)
        noise = rng.standard_normal((count,) + self.mean.shape)
        return self.mean + np.einsum("...ij,n...j->n...i", chol, noise)


def gamma_moments(params: GammaParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean a/b, variance a/b^2 and E[log v] = digamma(a) - log(b)."""
    return params.mean(), params.variance(), params.expected_log()


def wishart_moments(params: WishartParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean nu W^-1 and E[log det X]."""
    return params.mean(), params.expected_logdet()


def dirichlet_moments(params: DirichletParams) -> tuple[np.ndarray, np.ndarray]:
    """Mean and E[log v] of each coordinate."""
    return params.mean(), params.expected_log()


def categorical_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy along the last axis with the convention 0 log 0 = 0."""
    probs = _as_float(probs)
    return -special.xlogy(probs, probs).sum(axis=-1)


def sample(dist, rng_seed, count: int) -> np.ndarray:
    """Draw ``count`` samples from any of the parameter types in this module."""
    if count < 1:
        raise DistributionError("count must be at least one")
    if not hasattr(dist, "sample"):
        raise DistributionError(f"cannot sample from {type(dist).__name__}")
    return dist.sample(rng_seed, count)
