"""Seeded synthetic instances with planted communities."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .distributions import WishartParams
from .model import Dataset, ValidationError

LAYOUTS = ("gaussian_means", "sierpinski", "explicit")


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the generative recipe.

    Community precisions are drawn from ``Wishart(wishart_nu, I / wishart_scale)``
    (mean ``wishart_nu * wishart_scale^-1 * I``) when ``wishart_nu`` is set,
    otherwise every community uses ``within_precision * I``.
    """

    n: int = 50
    T: int = 100
    p: int = 2
    K: int = 5
    community_layout: str = "gaussian_means"
    mean_variance: float = 1.0
    means: Optional[Sequence[Sequence[float]]] = None
    sierpinski_scale: float = 1.0
    wishart_nu: Optional[float] = 50.0
    wishart_scale: float = 1.0
    within_precision: float = 10.0
    noise_gamma: tuple = (100.0, 10.0)
    size_distribution: Optional[Sequence[float]] = None
    balanced: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.community_layout not in LAYOUTS:
            raise ValidationError(f"community_layout must be one of {LAYOUTS}")
        if not (self.n >= self.K >= 1 and self.T >= 1 and self.p >= 1):
            raise ValidationError("require n >= K >= 1, T >= 1 and p >= 1")
        positive = [self.mean_variance, self.wishart_scale, self.within_precision, self.sierpinski_scale]
        positive += list(self.noise_gamma)
        if min(positive) <= 0:
            raise ValidationError("all scale parameters must be positive")
        if self.community_layout == "sierpinski" and (self.K != 9 or self.p != 2):
            raise ValidationError("the sierpinski layout has K=9 communities in p=2 dimensions")
        if self.community_layout == "explicit":
            if self.means is None or np.shape(self.means) != (self.K, self.p):
                raise ValidationError("explicit layout needs a K x p list of means")
        if self.size_distribution is not None:
            rho = np.asarray(self.size_distribution, dtype=float)
            if rho.shape != (self.K,) or np.any(rho < 0) or not np.isclose(rho.sum(), 1):
                raise ValidationError("size_distribution must be a probability vector of length K")


@dataclass
class SyntheticInstance:
    dataset: Dataset
    true_labels: np.ndarray  # 1-based
    true_A: np.ndarray
    true_mu: np.ndarray
    true_Lambda: np.ndarray
    true_x: np.ndarray
    true_tau: np.ndarray
    config: Optional[GeneratorConfig] = field(default=None, repr=False)


def sierpinski_layout(levels: int = 2, scale: float = 1.0) -> np.ndarray:
    """Nine community means: three triads of three on a larger triangle.

    The triad centres form an equilateral triangle of side ``scale``; each
    triad is the same triangle shrunk by a factor of three.
    """
    if levels != 2:
        raise ValidationError("only the two-level layout is supported")
    if scale <= 0:
        raise ValidationError("scale must be positive")
    angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    unit = np.stack([np.cos(angles), np.sin(angles)], axis=1) / np.sqrt(3)
    centres = scale * unit
    return (centres[:, None, :] + scale / 3 * unit[None, :, :]).reshape(9, 2)


def triad_labels(labels: np.ndarray) -> np.ndarray:
    """Map sierpinski community labels 1..9 to their triad 1..3."""
    return (np.asarray(labels) - 1) // 3 + 1


def _community_means(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    if config.community_layout == "gaussian_means":
        return rng.normal(0.0, np.sqrt(config.mean_variance), size=(config.K, config.p))
    if config.community_layout == "sierpinski":
        return sierpinski_layout(2, config.sierpinski_scale)
    return np.asarray(config.means, dtype=float)


def _community_precisions(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    p = config.p
    if config.wishart_nu is None:
        return np.broadcast_to(config.within_precision * np.eye(p), (config.K, p, p)).copy()
    prior = WishartParams(config.wishart_nu, config.wishart_scale * np.eye(p))
    return prior.sample(rng, config.K)


def _labels(config: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    K = config.K
    rho = np.full(K, 1 / K) if config.size_distribution is None else np.asarray(config.size_distribution)
    if config.balanced:
        counts = np.floor(rho * config.n).astype(int)
        remainder = config.n - counts.sum()
        counts[np.argsort(-(rho * config.n - counts), kind="stable")[:remainder]] += 1
        labels = np.repeat(np.arange(1, K + 1), counts)
        return rng.permutation(labels)
    return rng.choice(K, size=config.n, p=rho) + 1


def generate(config: GeneratorConfig) -> SyntheticInstance:
    """Draw a dataset from the hierarchical model; a pure function of ``config``."""
    rng = np.random.default_rng(config.seed)
    mu = _community_means(config, rng)
    precisions = _community_precisions(config, rng)
    labels = _labels(config, rng)
    chol_cov = np.linalg.cholesky(np.linalg.inv(precisions))
    idx = labels - 1
    noise = rng.standard_normal((config.n, config.p))
    A = mu[idx] + np.einsum("ipq,iq->ip", chol_cov[idx], noise)
    x = rng.standard_normal((config.T, config.p))
    shape, rate = config.noise_gamma
    tau = rng.gamma(shape, 1 / rate, size=config.n)
    y = x @ A.T + rng.standard_normal((config.T, config.n)) / np.sqrt(tau)
    dataset = Dataset(
        values=y,
        series_ids=[f"s{i}" for i in range(config.n)],
        timestamps=[str(t) for t in range(config.T)],
    )
    return SyntheticInstance(dataset, labels, A, mu, precisions, x, tau, config)


def _isotropic_scalar(matrix: np.ndarray, what: str) -> float:
    matrix = np.atleast_2d(matrix)
    value = matrix[0, 0]
    if not np.allclose(matrix, value * np.eye(len(matrix)), rtol=1e-9, atol=1e-12):
        raise ValidationError(f"{what} is anisotropic; report per-axis separations instead")
    return float(value)


def separation(config: GeneratorConfig) -> float:
    """Community separation h = sqrt(E[Lambda] var[mu]) under the generator."""
    p = config.p
    if config.wishart_nu is None:
        expected_precision = config.within_precision
    else:
        expected_precision = _isotropic_scalar(
            WishartParams(config.wishart_nu, config.wishart_scale * np.eye(p)).mean(), "E[Lambda]"
        )
    if config.community_layout == "gaussian_means":
        mean_variance = config.mean_variance
    else:
        means = sierpinski_layout(2, config.sierpinski_scale) if config.community_layout == "sierpinski" else np.asarray(config.means, dtype=float)
        mean_variance = _isotropic_scalar(np.cov(means.T, bias=True), "var[mu]")
    return float(np.sqrt(expected_precision * mean_variance))


def config_for_separation(h: float, within_precision: float = 10.0, **kwargs) -> GeneratorConfig:
    """Fixed ``within_precision * I`` communities with means scaled to give ``h``."""
    return GeneratorConfig(
        wishart_nu=None,
        within_precision=within_precision,
        mean_variance=h**2 / within_precision,
        **kwargs,
    )


def mask_random(dataset: Dataset, fraction: float, seed=None, max_attempts: int = 100) -> Dataset:
    """Mask ``floor(fraction * T * n)`` additional observed cells uniformly.

    Draws are repeated until no series is left without observations.
    """
    if not 0 <= fraction < 1:
        raise ValidationError("fraction must lie in [0, 1)")
    count = int(np.floor(fraction * dataset.T * dataset.n))
    if count == 0:
        return dataset.with_mask(dataset.mask.copy())
    observed = np.flatnonzero(dataset.mask.ravel())
    if count > observed.size:
        raise ValidationError("not enough observed cells to mask")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        chosen = rng.choice(observed, size=count, replace=False)
        mask = dataset.mask.copy().ravel()
        mask[chosen] = False
        mask = mask.reshape(dataset.mask.shape)
        if mask.any(axis=0).all():
            return dataset.with_mask(mask)
    raise ValidationError(f"masking {fraction:.0%} leaves a series without observations")
