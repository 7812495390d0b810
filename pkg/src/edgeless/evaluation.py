"""Partition metrics, the PCA + k-means baseline and imputation scoring."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .distributions import GammaParams, MvNormalParams
from .inference import FitConfig, apply_update, extract_labels, fit, optimize
from .kmeans import kmeans
from .model import Dataset, FitResult, Hyperparameters, PosteriorState, ValidationError
from .synthesis import SyntheticInstance

IMPUTE_MODES = ("loadings", "community")


@dataclass
class EvaluationReport:
    nmi: Optional[float] = None
    k_hat_error: Optional[int] = None
    rmse_loadings_prediction: Optional[float] = None
    rmse_community_mean_prediction: Optional[float] = None
    rmse_global_mean_prediction: Optional[float] = None
    folds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EvaluationReport":
        return cls(**data)


def _contingency(labels_a, labels_b) -> np.ndarray:
    _, ia = np.unique(labels_a, return_inverse=True)
    _, ib = np.unique(labels_b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1)
    return table


def nmi(labels_a, labels_b) -> float:
    """Normalised mutual information I(a, b) / sqrt(H(a) H(b)) in nats.

    If either labelling is constant the entropy vanishes; the result is then
    1.0 when the two partitions coincide and 0.0 otherwise.
    """
    a, b = np.asarray(labels_a), np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be one-dimensional and of equal length")
    if a.size == 0:
        raise ValueError("label vectors must not be empty")
    table = _contingency(a, b) / a.size
    pa, pb = table.sum(axis=1), table.sum(axis=0)
    ha = -(pa * np.log(pa)).sum()
    hb = -(pb * np.log(pb)).sum()
    if ha <= 0 or hb <= 0:
        return 1.0 if table.shape == (1, 1) else 0.0
    nz = table > 0
    mi = (table[nz] * np.log(table[nz] / np.outer(pa, pb)[nz])).sum()
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


def pca_kmeans_baseline(dataset: Dataset, K: int, n_components: int = 2, seed=None, runs: int = 10) -> np.ndarray:
    """Cluster the leading eigenvectors of the correlation matrix with k-means.

    Returns 1-based labels.
    """
    if not dataset.mask.all():
        raise ValidationError("the PCA baseline requires a fully observed dataset")
    if K > dataset.n:
        raise ValidationError(f"K={K} exceeds the number of series {dataset.n}")
    std = dataset.values.std(axis=0)
    constant = np.flatnonzero(std == 0)
    if constant.size:
        names = ", ".join(dataset.series_ids[i] for i in constant)
        raise ValidationError(f"constant series have undefined correlation: {names}")
    corr = np.corrcoef(dataset.values, rowvar=False)
    embedding = leading_eigenvectors(corr, n_components)
    labels, _, _ = kmeans(embedding, K, runs=runs, seed=seed)
    return labels + 1


def leading_eigenvectors(matrix: np.ndarray, count: int) -> np.ndarray:
    """Eigenvectors of a symmetric matrix for its ``count`` largest eigenvalues."""
    values, vectors = np.linalg.eigh(matrix)
    order = np.argsort(values)[::-1][:count]
    return vectors[:, order]


def impute(state: PosteriorState, cells, mode: str = "loadings") -> np.ndarray:
    """Predict y[t, i] for each ``(t, i)`` in ``cells``.

    ``mode="loadings"`` uses E[A_i] . E[x_t]; ``mode="community"`` replaces the
    loadings by the mean of the series' most probable community.
    """
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    T, n = state.q_x.mean.shape[0], state.q_A.mean.shape[0]
    t, i = cells[:, 0], cells[:, 1]
    if np.any((t < 0) | (t >= T) | (i < 0) | (i >= n)):
        raise IndexError("cell index out of range")
    if mode == "loadings":
        loadings = state.q_A.mean[i]
    elif mode == "community":
        labels, _ = extract_labels(state.q_z)
        loadings = state.q_mu.mean[labels[i] - 1]
    else:
        raise ValueError(f"mode must be one of {IMPUTE_MODES}")
    return np.einsum("cp,cp->c", loadings, state.q_x.mean[t])


def k_hat_error(result: FitResult, truth: SyntheticInstance) -> int:
    """Inferred minus planted number of communities."""
    K = truth.config.K if truth.config is not None else len(np.unique(truth.true_labels))
    return int(result.k_hat - K)


def infer_new_series(
    shared: PosteriorState,
    dataset: Dataset,
    hyper: Hyperparameters,
    max_sweeps: int = 1000,
    rel_tol: float = 1e-6,
) -> PosteriorState:
    """Infer loadings, noise and assignments of new series against frozen
    latent factors and community parameters."""
    mask, n, p = dataset.mask, dataset.n, hyper.p
    counts = mask.sum(axis=0)
    filled = dataset.filled()
    # start A from a per-series regression on the frozen factors so that the
    # community prior cannot trap a series whose loadings start far from it
    x_mean = shared.q_x.mean
    gram = np.einsum("ti,tab->iab", mask.astype(float), shared.q_x.second_moment) + 1e-6 * np.eye(p)
    A0 = np.linalg.solve(gram, (x_mean.T @ filled).T[..., None])[..., 0]
    resid = mask * (filled - x_mean @ A0.T)
    var = np.maximum((resid**2).sum(axis=0) / counts, 1e-6)
    shape = hyper.noise_alpha + counts / 2
    state = PosteriorState(
        q_x=shared.q_x,
        q_tau=GammaParams(shape, shape * var),
        q_A=MvNormalParams(A0, gram / var[:, None, None]),
        q_mu=shared.q_mu,
        q_Lambda=shared.q_Lambda,
        q_z=np.tile(shared.q_rho.mean(), (n, 1)),
        q_rho=shared.q_rho,
        q_lambda=shared.q_lambda,
    )
    apply_update("z", state, dataset, hyper)
    optimize(state, dataset, hyper, ("A", "tau", "z"), max_sweeps, rel_tol)
    return state


def holdout_protocol(
    dataset: Dataset,
    hyper: Hyperparameters,
    config: FitConfig = FitConfig(),
    train_fraction: float = 0.5,
    folds: int = 10,
    seed=None,
) -> EvaluationReport:
    """Two-stage imputation cross-validation.

    A random ``train_fraction`` of the series is fitted to learn the latent
    factors and community parameters. The observed cells of the remaining
    series are split into ``folds`` folds; each fold is hidden in turn, the
    loadings and assignments of those series are inferred against the frozen
    shared factors, and the hidden cells are predicted.
    """
    if dataset.n < 4:
        raise ValidationError("the hold-out protocol needs at least four series")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    if not 1 <= n_train < dataset.n:
        raise ValidationError("train_fraction leaves no training or no test series")
    train_idx, test_idx = np.sort(order[:n_train]), np.sort(order[n_train:])
    trained = fit(dataset.subset(train_idx), hyper, replace_seed(config, rng))
    shared = trained.state

    test = dataset.subset(test_idx)
    cells = np.argwhere(test.mask)
    cells = cells[rng.permutation(len(cells))]
    fold_cells = np.array_split(cells, folds)
    train_values = dataset.values[:, train_idx][dataset.mask[:, train_idx]]

    squared = {"loadings": [], "community": [], "global": []}
    details = []
    for k, held in enumerate(fold_cells):
        mask = test.mask.copy()
        mask[held[:, 0], held[:, 1]] = False
        if not mask.any(axis=0).all():
            raise ValidationError(f"fold {k} leaves a series without observations")
        # hidden cells are poisoned so any read surfaces as a NaN failure
        poisoned = Dataset(np.where(mask, test.values, np.nan), mask, test.series_ids, test.timestamps)
        state = infer_new_series(shared, poisoned, trained.hyper or hyper, config.max_sweeps, config.elbo_rel_tol)
        truth = test.values[held[:, 0], held[:, 1]]
        global_mean = np.concatenate([train_values, test.values[mask]]).mean()
        errs = {
            "loadings": impute(state, held, "loadings") - truth,
            "community": impute(state, held, "community") - truth,
            "global": global_mean - truth,
        }
        for key, err in errs.items():
            squared[key].append(err**2)
        details.append(
            {
                "fold": k,
                "cells": int(len(held)),
                **{f"rmse_{key}": float(np.sqrt(np.mean(err**2))) for key, err in errs.items()},
            }
        )
    rmse = {key: float(np.sqrt(np.concatenate(val).mean())) for key, val in squared.items()}
    return EvaluationReport(
        rmse_loadings_prediction=rmse["loadings"],
        rmse_community_mean_prediction=rmse["community"],
        rmse_global_mean_prediction=rmse["global"],
        folds=details,
    )


def replace_seed(config: FitConfig, rng: np.random.Generator) -> FitConfig:
    from dataclasses import replace

    return replace(config, seed=int(rng.integers(2**31)))
