"""Data containers for the hierarchical latent-factor mixture model.

Observations ``y[t, i]`` (time step t, series i) follow

    y[t, i] ~ Normal(x[t] . A[i], 1 / tau[i])
    x[t]    ~ Normal(0, I_p)
    A[i]    ~ Normal(mu[g_i], Lambda[g_i]^-1),   g_i ~ Categorical(rho)
    mu[k,q] ~ Normal(0, 1 / lambda[k,q]),        lambda[k,q] ~ Gamma(a, b)
    Lambda[k] ~ Wishart(nu, W),                  rho ~ Dirichlet(gamma 1_K)
    tau[i]  ~ Gamma(alpha, beta)

Symbol audit (every model symbol lives in exactly one place):

==========  ==========================================
y, n, T     ``Dataset.values`` (shape T x n)
p, K        ``Hyperparameters.p``, ``Hyperparameters.k_max``
w           ``1 / Hyperparameters.prior_precision``
a, b        ``Hyperparameters.ard_a``, ``ard_b``
alpha, beta ``Hyperparameters.noise_alpha``, ``noise_beta``
gamma       ``Hyperparameters.dirichlet_gamma``
nu, W       ``Hyperparameters.wishart_nu``, ``wishart_scale``
x           ``PosteriorState.q_x``
tau         ``PosteriorState.q_tau``
A           ``PosteriorState.q_A``
mu          ``PosteriorState.q_mu``
Lambda      ``PosteriorState.q_Lambda``
z, g        ``PosteriorState.q_z`` (g = argmax of z)
rho         ``PosteriorState.q_rho``
lambda      ``PosteriorState.q_lambda``
==========  ==========================================
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .distributions import DirichletParams, GammaParams, MvNormalParams, WishartParams

logger = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Inputs violate the model's preconditions."""


@dataclass
class Dataset:
    """A T x n matrix of observations with a boolean mask (True = observed)."""

    values: np.ndarray
    mask: Optional[np.ndarray] = None
    series_ids: Optional[Sequence[str]] = None
    timestamps: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValidationError("values must be a T x n matrix")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValidationError("mask shape must match values shape")
        if self.series_ids is None:
            self.series_ids = [f"s{i}" for i in range(self.n)]
        self.series_ids = [str(s) for s in self.series_ids]
        if len(self.series_ids) != self.n:
            raise ValidationError("series_ids must have one entry per column")
        if self.timestamps is not None:
            self.timestamps = [str(t) for t in self.timestamps]
            if len(self.timestamps) != self.T:
                raise ValidationError("timestamps must have one entry per row")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def filled(self) -> np.ndarray:
        """Values with masked cells set to zero; masked content is never read."""
        return np.where(self.mask, self.values, 0.0)

    def subset(self, columns) -> "Dataset":
        columns = np.asarray(columns)
        return Dataset(
            values=self.values[:, columns],
            mask=self.mask[:, columns],
            series_ids=[self.series_ids[i] for i in columns],
            timestamps=self.timestamps,
        )

    def with_mask(self, mask: np.ndarray) -> "Dataset":
        return replace(self, values=self.values.copy(), mask=np.asarray(mask, dtype=bool))


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed prior constants.

    ``prior_precision`` is w^-1, the prior expectation of each community's
    precision: ``E[Lambda] = prior_precision * I_p``.
    """

    p: int
    k_max: int
    prior_precision: float = 1.0
    ard_a: float = 1e-3
    ard_b: float = 1e-3
    noise_alpha: float = 1e-3
    noise_beta: float = 1e-3
    dirichlet_gamma: float = 1e-3
    wishart_nu: Optional[float] = None

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise ValidationError("p must be a positive integer")
        if int(self.k_max) != self.k_max or self.k_max < 1:
            raise ValidationError("k_max must be a positive integer")
        if not self.prior_precision > 0:
            raise ValidationError("prior precision must be positive")
        for name in ("ard_a", "ard_b", "noise_alpha", "noise_beta", "dirichlet_gamma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if not self.nu > self.p - 1:
            raise ValidationError("wishart_nu must exceed p - 1")

    @property
    def w(self) -> float:
        return 1.0 / self.prior_precision

    @property
    def nu(self) -> float:
        return float(self.p if self.wishart_nu is None else self.wishart_nu)

    @property
    def wishart_scale(self) -> np.ndarray:
        return self.p * self.w * np.eye(self.p)

    def wishart_prior(self) -> WishartParams:
        return WishartParams(self.nu, self.wishart_scale)


@dataclass
class PosteriorState:
    """The mean-field posterior: one factor per model parameter block."""

    q_x: MvNormalParams  # (T, p)
    q_tau: GammaParams  # (n,)
    q_A: MvNormalParams  # (n, p)
    q_mu: MvNormalParams  # (K, p)
    q_Lambda: WishartParams  # (K,)
    q_z: np.ndarray  # (n, K) responsibilities
    q_rho: DirichletParams  # (K,)
    q_lambda: GammaParams  # (K, p)

    @property
    def k_max(self) -> int:
        return self.q_z.shape[1]

    def copy(self) -> "PosteriorState":
        return replace(self, q_z=self.q_z.copy())

    def check(self, atol: float = 1e-10) -> None:
        """Raise :class:`ValidationError` if a factor violates its invariants."""
        z = self.q_z
        if np.any(z < -atol) or np.any(z > 1 + atol):
            raise ValidationError("responsibilities must lie in [0, 1]")
        if np.any(np.abs(z.sum(axis=1) - 1) > atol):
            raise ValidationError("responsibilities must sum to one")
        for q in (self.q_x, self.q_A, self.q_mu):
            np.linalg.cholesky(q.precision)
        np.linalg.cholesky(self.q_Lambda.scale)


@dataclass
class FitResult:
    """Outcome of :func:`edgeless.inference.fit`."""

    state: PosteriorState
    elbo_trace: list
    converged: bool
    labels: np.ndarray  # 1-based community labels
    k_hat: int
    restart_index: int = 0
    wall_clock_seconds: float = 0.0
    hyper: Optional[Hyperparameters] = None
    restart_elbos: list = field(default_factory=list)
    restart_k_hats: list = field(default_factory=list)
    failed_restarts: list = field(default_factory=list)

    @property
    def elbo(self) -> float:
        return float(self.elbo_trace[-1])

    @property
    def n_sweeps(self) -> int:
        return len(self.elbo_trace) - 1


def expected_outer(q: MvNormalParams) -> np.ndarray:
    """E[v v^T] for ``v ~ q``."""
    return q.second_moment


def validate(dataset: Dataset, hyper: Hyperparameters) -> None:
    """Check a dataset and hyperparameters before fitting.

    Raises
    ------
    ValidationError
        If observed cells are not finite, a series has no observed cells, or
        a hyperparameter is out of range.
    """
    if dataset.T < 1 or dataset.n < 1:
        raise ValidationError("dataset must have at least one row and one column")
    bad = dataset.mask & ~np.isfinite(dataset.values)
    if bad.any():
        t, i = np.argwhere(bad)[0]
        raise ValidationError(f"observed cell ({t}, {dataset.series_ids[i]}) is not finite")
    empty = np.flatnonzero(~dataset.mask.any(axis=0))
    if empty.size:
        names = ", ".join(dataset.series_ids[i] for i in empty)
        raise ValidationError(f"series without observed entries: {names}")
    if not hyper.prior_precision > 0:
        raise ValidationError("prior precision must be positive")
    if hyper.p > min(dataset.T, dataset.n):
        logger.warning(
            "p=%d exceeds min(T, n)=%d; the factor model is under-determined",
            hyper.p,
            min(dataset.T, dataset.n),
        )
