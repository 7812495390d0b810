"""Coordinate-ascent variational inference for the latent-factor mixture.

Each ``update_*`` function returns the optimal factor for one parameter block
given all other factors; applying them in turn never decreases
:func:`compute_elbo`.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .distributions import (
    LOG_2PI,
    DirichletParams,
    DistributionError,
    GammaParams,
    MvNormalParams,
    WishartParams,
    categorical_entropy,
    spd_inverse,
)
from .kmeans import kmeans
from .model import Dataset, FitResult, Hyperparameters, PosteriorState, ValidationError, validate

logger = logging.getLogger(__name__)

UPDATE_ORDER = ("x", "tau", "A", "mu", "Lambda", "z", "rho", "lambda")
KNOWN_K_PRECISION = 1e6
MONOTONE_SLACK = 1e-8


class InferenceError(RuntimeError):
    """A coordinate update produced an invalid factor."""


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 1000
    elbo_rel_tol: float = 1e-6
    n_restarts: int = 50
    kmeans_runs: int = 10
    seed: int = 0
    update_order: tuple = UPDATE_ORDER
    known_k_mode: bool = False
    jobs: int = 1

    def __post_init__(self):
        if not (self.elbo_rel_tol > 0 and self.max_sweeps >= 1):
            raise ValidationError("tolerances must be positive")
        if self.n_restarts < 1:
            raise ValidationError("n_restarts must be at least one")
        if self.kmeans_runs < 1:
            raise ValidationError("kmeans_runs must be at least one")
        unknown = set(self.update_order) - set(UPDATE_ORDER)
        if unknown:
            raise ValidationError(f"unknown factors in update_order: {sorted(unknown)}")


# -- helpers -----------------------------------------------------------------


def _gaussian(precision: np.ndarray, rhs: np.ndarray) -> MvNormalParams:
    """Normal factor from its precision and precision-weighted mean."""
    precision = (precision + np.swapaxes(precision, -1, -2)) / 2
    try:
        cov, logdet = spd_inverse(precision)
    except DistributionError as exc:
        raise InferenceError("posterior precision is not positive definite") from exc
    mean = np.einsum("...ij,...j->...i", cov, rhs)
    q = MvNormalParams(mean, precision)
    q.__dict__["_inverse"] = (cov, logdet)
    return q


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def _trace_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """tr(A B) for symmetric batches, i.e. sum of elementwise products."""
    return (a * b).sum(axis=(-1, -2))


def _observed(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    cache = dataset.__dict__.get("_edgeless_cache")
    if cache is None or cache[0] is not dataset.mask:
        mask = dataset.mask.astype(float)
        cache = (dataset.mask, mask, dataset.filled())
        dataset.__dict__["_edgeless_cache"] = cache
    return cache[1], cache[2]


def expected_squared_residuals(state: PosteriorState, dataset: Dataset) -> np.ndarray:
    """Per-series sum over observed t of E[(y_ti - A_i . x_t)^2]."""
    mask, y = _observed(dataset)
    ex, ea = state.q_x.mean, state.q_A.mean
    sx, sa = state.q_x.second_moment, state.q_A.second_moment
    cross = (mask * y * (ex @ ea.T)).sum(axis=0)
    quad = (_flat(sa) * (mask.T @ _flat(sx))).sum(axis=1)
    return (mask * y**2).sum(axis=0) - 2 * cross + quad


# -- coordinate updates ------------------------------------------------------


def update_latent_factors(state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> MvNormalParams:
    mask, y = _observed(dataset)
    p = hyper.p
    weights = mask * state.q_tau.mean()
    precision = np.eye(p) + (weights @ _flat(state.q_A.second_moment)).reshape(-1, p, p)
    rhs = (weights * y) @ state.q_A.mean
    return _gaussian(precision, rhs)


def update_noise_precision(state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> GammaParams:
    mask, _ = _observed(dataset)
    resid = expected_squared_residuals(state, dataset)
    scale = (mask * _observed(dataset)[1] ** 2).sum(axis=0) + 1.0
    if np.any(resid < -1e-9 * scale):
        raise InferenceError("negative expected squared residual")
    resid = np.maximum(resid, 0.0)
    return GammaParams(hyper.noise_alpha + mask.sum(axis=0) / 2, hyper.noise_beta + resid / 2)


def update_factor_loadings(state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> MvNormalParams:
    mask, y = _observed(dataset)
    p = hyper.p
    etau = state.q_tau.mean()
    elam = state.q_Lambda.mean()
    z = state.q_z
    data_prec = (mask.T @ _flat(state.q_x.second_moment)).reshape(-1, p, p)
    precision = etau[:, None, None] * data_prec + (z @ _flat(elam)).reshape(-1, p, p)
    prior_rhs = np.einsum("kpq,kq->kp", elam, state.q_mu.mean)
    rhs = etau[:, None] * ((mask * y).T @ state.q_x.mean) + z @ prior_rhs
    return _gaussian(precision, rhs)


def update_community_means(state: PosteriorState, hyper: Hyperparameters) -> MvNormalParams:
    z = state.q_z
    elam = state.q_Lambda.mean()
    sizes = z.sum(axis=0)
    precision = sizes[:, None, None] * elam + np.einsum("kp,pq->kpq", state.q_lambda.mean(), np.eye(hyper.p))
    rhs = np.einsum("kpq,kq->kp", elam, z.T @ state.q_A.mean)
    return _gaussian(precision, rhs)


def update_community_precisions(state: PosteriorState, hyper: Hyperparameters) -> WishartParams:
    z = state.q_z
    p = hyper.p
    sizes = z.sum(axis=0)
    weighted_a = z.T @ state.q_A.mean
    emu = state.q_mu.mean
    cross = weighted_a[:, :, None] * emu[:, None, :]
    scatter = (
        (z.T @ _flat(state.q_A.second_moment)).reshape(-1, p, p)
        - cross
        - np.swapaxes(cross, -1, -2)
        + sizes[:, None, None] * state.q_mu.second_moment
    )
    scale = hyper.wishart_scale + scatter
    asym = np.abs(scale - np.swapaxes(scale, -1, -2)).max()
    if asym > 1e-10 * max(1.0, np.abs(scale).max()):
        raise InferenceError("wishart scale lost symmetry")
    scale = (scale + np.swapaxes(scale, -1, -2)) / 2
    try:
        return WishartParams(hyper.nu + sizes, scale)
    except DistributionError as exc:
        raise InferenceError(str(exc)) from exc


def assignment_logits(state: PosteriorState) -> np.ndarray:
    """Unnormalised log responsibilities (n, K)."""
    q_lam = state.q_Lambda
    elam = q_lam.mean()
    emu = state.q_mu.mean
    quad = (
        _flat(state.q_A.second_moment) @ _flat(elam).T
        - 2 * state.q_A.mean @ np.einsum("kpq,kq->kp", elam, emu).T
        + _trace_product(elam, state.q_mu.second_moment)[None, :]
    )
    return q_lam.expected_logdet() / 2 - quad / 2 + state.q_rho.expected_log()


def update_assignments(state: PosteriorState, hyper: Hyperparameters) -> np.ndarray:
    logits = assignment_logits(state)
    return np.exp(logits - special.logsumexp(logits, axis=1, keepdims=True))


def update_community_sizes(state: PosteriorState, hyper: Hyperparameters) -> DirichletParams:
    return DirichletParams(hyper.dirichlet_gamma + state.q_z.sum(axis=0))


def update_ard(state: PosteriorState, hyper: Hyperparameters) -> GammaParams:
    sq = np.diagonal(state.q_mu.second_moment, axis1=-2, axis2=-1)
    return GammaParams(np.full(sq.shape, hyper.ard_a + 0.5), hyper.ard_b + sq / 2)


def apply_update(name: str, state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> None:
    """Replace one factor of ``state`` in place by its coordinate optimum."""
    if name == "x":
        state.q_x = update_latent_factors(state, dataset, hyper)
    elif name == "tau":
        state.q_tau = update_noise_precision(state, dataset, hyper)
    elif name == "A":
        state.q_A = update_factor_loadings(state, dataset, hyper)
    elif name == "mu":
        state.q_mu = update_community_means(state, hyper)
    elif name == "Lambda":
        state.q_Lambda = update_community_precisions(state, hyper)
    elif name == "z":
        state.q_z = update_assignments(state, hyper)
    elif name == "rho":
        state.q_rho = update_community_sizes(state, hyper)
    elif name == "lambda":
        state.q_lambda = update_ard(state, hyper)
    else:
        raise ValueError(f"unknown factor {name!r}")


# -- objective ---------------------------------------------------------------


def elbo_terms(state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> dict:
    """Expected log joint terms and factor entropies, including all constants."""
    mask, _ = _observed(dataset)
    p, k = hyper.p, state.k_max
    counts = mask.sum(axis=0)
    z = state.q_z

    etau, elogtau = state.q_tau.mean(), state.q_tau.expected_log()
    elam, elogdet = state.q_Lambda.mean(), state.q_Lambda.expected_logdet()
    eard, elogard = state.q_lambda.mean(), state.q_lambda.expected_log()
    elogrho = state.q_rho.expected_log()
    emu2 = np.diagonal(state.q_mu.second_moment, axis1=-2, axis2=-1)

    quad = (
        _flat(state.q_A.second_moment) @ _flat(elam).T
        - 2 * state.q_A.mean @ np.einsum("kpq,kq->kp", elam, state.q_mu.mean).T
        + _trace_product(elam, state.q_mu.second_moment)[None, :]
    )
    noise_prior = GammaParams(hyper.noise_alpha, hyper.noise_beta)
    ard_prior = GammaParams(hyper.ard_a, hyper.ard_b)
    terms = {
        "y": float(
            (counts * (elogtau - LOG_2PI) / 2).sum()
            - (etau * expected_squared_residuals(state, dataset)).sum() / 2
        ),
        "x": float(-(dataset.T * p * LOG_2PI) / 2 - np.trace(state.q_x.second_moment, axis1=1, axis2=2).sum() / 2),
        "tau": float(noise_prior.expected_logpdf(etau, elogtau).sum()),
        "A": float((z * (elogdet[None, :] / 2 - p * LOG_2PI / 2 - quad / 2)).sum()),
        "mu": float(((elogard - LOG_2PI) / 2 - eard * emu2 / 2).sum()),
        "Lambda": float(hyper.wishart_prior().expected_logpdf(elam, elogdet).sum()),
        "lambda": float(ard_prior.expected_logpdf(eard, elogard).sum()),
        "z": float((z * elogrho).sum()),
        "rho": float(DirichletParams(np.full(k, hyper.dirichlet_gamma)).expected_logpdf(elogrho)),
        "H[x]": float(state.q_x.entropy().sum()),
        "H[tau]": float(state.q_tau.entropy().sum()),
        "H[A]": float(state.q_A.entropy().sum()),
        "H[mu]": float(state.q_mu.entropy().sum()),
        "H[Lambda]": float(state.q_Lambda.entropy().sum()),
        "H[z]": float(categorical_entropy(z).sum()),
        "H[rho]": float(state.q_rho.entropy()),
        "H[lambda]": float(state.q_lambda.entropy().sum()),
    }
    return terms


def compute_elbo(state: PosteriorState, dataset: Dataset, hyper: Hyperparameters) -> float:
    """Evidence lower bound E[log P(y, theta) - log Q(theta)]."""
    value = sum(elbo_terms(state, dataset, hyper).values())
    if not np.isfinite(value):
        raise InferenceError(f"ELBO is not finite ({value})")
    return float(value)


# -- initialisation ------------------------------------------------------------


def ppca_init(dataset: Dataset, p: int, seed=None, alpha: float = 1e-3):
    """Maximum-likelihood probabilistic PCA of the mean-imputed, centred data.

    Returns initial ``(q_x, q_A, q_tau)``. With a ``seed`` the latent space is
    rotated by a random orthogonal matrix; the model is invariant to this.
    """
    values = np.where(dataset.mask, dataset.values, np.nan)
    counts = dataset.mask.sum(axis=0)
    col_mean = np.where(counts > 0, np.nansum(values, axis=0) / np.maximum(counts, 1), 0.0)
    centred = np.where(dataset.mask, values - col_mean, 0.0)
    T, n = centred.shape
    if p > min(T, n):
        raise ValidationError(f"p={p} exceeds min(T, n)={min(T, n)}")
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    tol = s.max(initial=0.0) * max(T, n) * np.finfo(float).eps
    if s[p - 1] <= tol:
        raise ValidationError(f"p={p} exceeds the rank of the data")

    eigvals = s**2 / T
    data_var = max(eigvals.sum() / n, np.finfo(float).tiny)
    discarded = eigvals[p:].sum() / (n - p) if n > p else 0.0
    sigma2 = max(discarded, 1e-12 * data_var)
    loadings = vt[:p].T * np.sqrt(np.maximum(eigvals[:p] - sigma2, 1e-12 * data_var))
    m = loadings.T @ loadings + sigma2 * np.eye(p)
    factors = np.linalg.solve(m, (centred @ loadings).T).T

    if seed is not None:
        q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((p, p)))
        rot = q * np.sign(np.diag(r))
        loadings, factors = loadings @ rot, factors @ rot

    q_x = MvNormalParams(factors, np.broadcast_to(100.0 * np.eye(p), (T, p, p)).copy())
    q_a = MvNormalParams(loadings, np.broadcast_to(np.eye(p) / (1e-2 * data_var), (n, p, p)).copy())
    shape = alpha + counts / 2
    q_tau = GammaParams(shape, shape * sigma2)
    return q_x, q_a, q_tau


def kmeans_init(loadings: np.ndarray, k_max: int, runs: int = 10, seed=None) -> np.ndarray:
    """Hard 0-based labels from the best of ``runs`` k-means++ runs."""
    loadings = np.asarray(loadings, dtype=float)
    if k_max > len(loadings):
        raise ValidationError(f"k_max={k_max} exceeds the number of series {len(loadings)}")
    labels, _, _ = kmeans(loadings, k_max, runs=runs, seed=seed)
    return labels


def initial_state(dataset: Dataset, hyper: Hyperparameters, kmeans_runs: int = 10, seed=None) -> PosteriorState:
    """PPCA for (x, A, tau), k-means for z, then the community factors."""
    rng = np.random.default_rng(seed)
    ppca_seed, km_seed = rng.integers(2**63, size=2)
    q_x, q_a, q_tau = ppca_init(dataset, hyper.p, seed=ppca_seed, alpha=hyper.noise_alpha)
    labels = kmeans_init(q_a.mean, hyper.k_max, kmeans_runs, seed=km_seed)
    return state_from_assignments(q_x, q_tau, q_a, labels, hyper)


def state_from_assignments(q_x, q_tau, q_a, labels, hyper: Hyperparameters) -> PosteriorState:
    """Complete a state from loadings and hard labels via community updates."""
    k, p = hyper.k_max, hyper.p
    z = np.zeros((len(labels), k))
    z[np.arange(len(labels)), labels] = 1.0
    prior = hyper.wishart_prior()
    state = PosteriorState(
        q_x=q_x,
        q_tau=q_tau,
        q_A=q_a,
        q_mu=MvNormalParams(np.zeros((k, p)), np.broadcast_to(np.eye(p), (k, p, p)).copy()),
        q_Lambda=WishartParams(np.full(k, prior.nu), np.broadcast_to(prior.scale, (k, p, p)).copy()),
        q_z=z,
        q_rho=DirichletParams(np.full(k, hyper.dirichlet_gamma)),
        q_lambda=GammaParams(np.full((k, p), hyper.ard_a), np.full((k, p), hyper.ard_b)),
    )
    for name in ("mu", "Lambda", "mu", "rho", "lambda"):
        apply_update(name, state, None, hyper)
    return state


# -- optimisation ---------------------------------------------------------------


def optimize(
    state: PosteriorState,
    dataset: Dataset,
    hyper: Hyperparameters,
    order=UPDATE_ORDER,
    max_sweeps: int = 1000,
    rel_tol: float = 1e-6,
    compiled: bool = True,
) -> tuple[list, bool]:
    """Sweep the coordinate updates in ``order`` until the relative ELBO gain
    drops below ``rel_tol``. Mutates ``state``; returns ``(trace, converged)``.

    The default order runs through the compiled kernels unless
    ``compiled=False``; both paths compute identical updates.
    """
    if compiled and tuple(order) == UPDATE_ORDER:
        from . import _kernels

        trace, converged, ok = _kernels.run(state, dataset, hyper, max_sweeps, rel_tol)
        if not ok:
            raise InferenceError("posterior precision is not positive definite")
        if not np.all(np.isfinite(trace)):
            raise InferenceError("ELBO is not finite")
        _check_monotone(trace)
        return trace, converged

    trace = [compute_elbo(state, dataset, hyper)]
    for _ in range(max_sweeps):
        for name in order:
            apply_update(name, state, dataset, hyper)
        trace.append(compute_elbo(state, dataset, hyper))
        _check_monotone(trace[-2:])
        prev, cur = trace[-2], trace[-1]
        if (cur - prev) / abs(prev) < rel_tol:
            return trace, True
    return trace, False


def _check_monotone(trace) -> None:
    trace = np.asarray(trace)
    drops = np.diff(trace) < -MONOTONE_SLACK * np.abs(trace[:-1])
    if drops.any():
        k = int(np.argmax(drops))
        logger.warning("ELBO decreased from %.12g to %.12g", trace[k], trace[k + 1])


def extract_labels(q_z: np.ndarray) -> tuple[np.ndarray, int]:
    """1-based argmax labels (ties go to the lowest index) and their count."""
    if isinstance(q_z, PosteriorState):
        q_z = q_z.q_z
    labels = np.argmax(np.asarray(q_z), axis=1) + 1
    return labels, int(len(np.unique(labels)))


def _effective_hyper(hyper: Hyperparameters, config: FitConfig) -> Hyperparameters:
    if config.known_k_mode:
        return replace(hyper, prior_precision=KNOWN_K_PRECISION)
    return hyper


def fit_restart(dataset: Dataset, hyper: Hyperparameters, config: FitConfig, restart: int) -> FitResult:
    """One initialisation + CAVI run; seeds derive from (config.seed, restart)."""
    start = time.perf_counter()
    seed = np.random.SeedSequence(config.seed, spawn_key=(restart,))
    state = initial_state(dataset, hyper, config.kmeans_runs, seed)
    trace, converged = optimize(
        state, dataset, hyper, config.update_order, config.max_sweeps, config.elbo_rel_tol
    )
    labels, k_hat = extract_labels(state.q_z)
    return FitResult(
        state=state,
        elbo_trace=trace,
        converged=converged,
        labels=labels,
        k_hat=k_hat,
        restart_index=restart,
        wall_clock_seconds=time.perf_counter() - start,
        hyper=hyper,
    )


def _safe_restart(args):
    dataset, hyper, config, restart = args
    try:
        return fit_restart(dataset, hyper, config, restart)
    except (InferenceError, DistributionError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return (restart, f"{type(exc).__name__}: {exc}")


def fit(dataset: Dataset, hyper: Hyperparameters, config: FitConfig = FitConfig()) -> FitResult:
    """Fit the model with ``config.n_restarts`` restarts and keep the best ELBO.

    Raises
    ------
    ValidationError
        For invalid inputs.
    InferenceError
        If every restart fails.
    """
    start = time.perf_counter()
    hyper = _effective_hyper(hyper, config)
    validate(dataset, hyper)
    if hyper.k_max > dataset.n:
        raise ValidationError(f"k_max={hyper.k_max} exceeds the number of series {dataset.n}")
    tasks = [(dataset, hyper, config, r) for r in range(config.n_restarts)]
    if config.jobs > 1 and config.n_restarts > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            outcomes = list(pool.map(_safe_restart, tasks))
    else:
        outcomes = [_safe_restart(task) for task in tasks]

    results = [o for o in outcomes if isinstance(o, FitResult)]
    failures = [o for o in outcomes if not isinstance(o, FitResult)]
    if not results:
        raise InferenceError(f"all {len(failures)} restarts failed; first error: {failures[0][1]}")
    best = max(results, key=lambda r: r.elbo)
    best.restart_elbos = [r.elbo for r in results]
    best.restart_k_hats = [r.k_hat for r in results]
    best.failed_restarts = failures
    best.wall_clock_seconds = time.perf_counter() - start
    return best
