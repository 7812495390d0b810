"""Empirical-Bayes grid search over the number of factors and prior precision."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .inference import FitConfig, InferenceError, fit
from .model import Dataset, FitResult, Hyperparameters, ValidationError

logger = logging.getLogger(__name__)

STRATEGIES = ("joint", "two_step")


def log_grid(low: float, high: float, count: int) -> list:
    """``count`` logarithmically spaced values from ``low`` to ``high``."""
    if not (0 < low <= high) or count < 1:
        raise ValidationError("log grid needs 0 < low <= high and count >= 1")
    return [float(v) for v in np.geomspace(low, high, count)]


@dataclass(frozen=True)
class SweepSpec:
    p_grid: Sequence[int]
    w_inverse_grid: Sequence[float]
    strategy: str = "joint"
    restarts: Optional[int] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}")
        if not self.p_grid or not self.w_inverse_grid:
            raise ValidationError("sweep grids must be non-empty")
        if any(int(p) != p or p < 1 for p in self.p_grid):
            raise ValidationError("p_grid entries must be positive integers")
        if any(not w > 0 for w in self.w_inverse_grid):
            raise ValidationError("w_inverse_grid entries must be positive")


@dataclass
class SweepResult:
    rows: list
    best_index: int
    best: FitResult
    selected_p: Optional[int] = None
    results: list = field(default_factory=list)  # per row; None for failed cells

    @property
    def best_row(self) -> dict:
        return self.rows[self.best_index]


def _fit_cell(args):
    dataset, hyper, config = args
    start = time.perf_counter()
    try:
        result = fit(dataset, hyper, config)
    except (InferenceError, ValidationError) as exc:
        return None, f"{type(exc).__name__}: {exc}", time.perf_counter() - start
    return result, None, time.perf_counter() - start


def _run_cells(cells, jobs: int):
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_fit_cell, cells))
    return [_fit_cell(cell) for cell in cells]


def _row(step: str, hyper: Hyperparameters, outcome) -> dict:
    result, error, seconds = outcome
    row = {
        "step": step,
        "p": hyper.p,
        "k_max": hyper.k_max,
        "w_inverse": hyper.prior_precision,
        "elbo": np.nan,
        "k_hat": 0,
        "k_hat_min": 0,
        "k_hat_max": 0,
        "wall_clock_seconds": seconds,
        "failed_restarts": 0,
        "status": "ok" if error is None else error,
        "best": False,
    }
    if result is not None:
        row.update(
            elbo=result.elbo,
            k_hat=result.k_hat,
            k_hat_min=int(min(result.restart_k_hats)),
            k_hat_max=int(max(result.restart_k_hats)),
            failed_restarts=len(result.failed_restarts),
        )
    return row


def run_sweep(dataset: Dataset, spec: SweepSpec, hyper: Hyperparameters, config: FitConfig = FitConfig()) -> SweepResult:
    """Fit every grid cell and mark the one with the highest ELBO.

    ``joint`` fits all (p, w^-1) pairs. ``two_step`` first chooses p by the
    ELBO of single-community fits (a Bayesian PPCA) at ``hyper.prior_precision``
    and then sweeps w^-1 at that p. Failed cells are recorded and skipped.
    """
    if spec.restarts is not None:
        config = replace(config, n_restarts=spec.restarts)
    jobs = config.jobs
    cell_config = replace(config, jobs=1)
    rows, results = [], []
    selected_p = None

    def run(step, hypers):
        outcomes = _run_cells([(dataset, h, cell_config) for h in hypers], jobs)
        for h, outcome in zip(hypers, outcomes):
            rows.append(_row(step, h, outcome))
            results.append(outcome[0])
            if outcome[1] is not None:
                logger.warning("cell p=%d w^-1=%g failed: %s", h.p, h.prior_precision, outcome[1])
        return outcomes

    if spec.strategy == "joint":
        run("joint", [replace(hyper, p=int(p), prior_precision=float(w)) for p in spec.p_grid for w in spec.w_inverse_grid])
        candidates = range(len(rows))
    else:
        ppca = run("factors", [replace(hyper, p=int(p), k_max=1) for p in spec.p_grid])
        elbos = [o[0].elbo if o[0] is not None else -np.inf for o in ppca]
        if not np.isfinite(max(elbos)):
            raise InferenceError("every cell of the factor sweep failed")
        selected_p = int(spec.p_grid[int(np.argmax(elbos))])
        first = len(rows)
        run("precision", [replace(hyper, p=selected_p, prior_precision=float(w)) for w in spec.w_inverse_grid])
        candidates = range(first, len(rows))

    valid = [i for i in candidates if results[i] is not None]
    if not valid:
        raise InferenceError("every sweep cell failed")
    best_index = max(valid, key=lambda i: results[i].elbo)
    rows[best_index]["best"] = True
    return SweepResult(rows=rows, best_index=best_index, best=results[best_index], selected_p=selected_p, results=results)
