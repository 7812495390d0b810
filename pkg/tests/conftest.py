import numpy as np
import pytest

import edgeless.inference as inference
from edgeless.distributions import DirichletParams, GammaParams, MvNormalParams, WishartParams
from edgeless.model import Dataset, Hyperparameters, PosteriorState

# -- suite-wide ELBO trace recording -----------------------------------------------
# Every call to ``optimize`` (directly or through ``fit``) in this process is
# recorded so the acceptance test can audit monotonicity over the whole suite.

RECORDED_TRACES: list = []
ACCEPTANCE_LINES: list = []

_original_optimize = inference.optimize


def _recording_optimize(*args, **kwargs):
    trace, converged = _original_optimize(*args, **kwargs)
    RECORDED_TRACES.append(np.asarray(trace, dtype=float))
    return trace, converged


inference.optimize = _recording_optimize


def pytest_collection_modifyitems(config, items):
    # the suite-wide monotonicity audit must see every other test's sweeps
    last = [it for it in items if "suite_wide_monotonicity" in it.name]
    rest = [it for it in items if "suite_wide_monotonicity" not in it.name]
    items[:] = rest + last


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- random instances ---------------------------------------------------------------


def random_spd(rng, p, scale=1.0):
    m = rng.standard_normal((p, p))
    return scale * (m @ m.T / p + np.eye(p))


def random_dataset(rng, T, n, missing=0.0):
    values = rng.standard_normal((T, n))
    mask = rng.random((T, n)) >= missing
    mask[0] = True  # keep every series observed at least once
    return Dataset(np.where(mask, values, np.nan), mask)


def random_state(rng, T, n, p, k) -> PosteriorState:
    """A valid but arbitrary (non-stationary) posterior state."""
    batch_spd = lambda m, s=1.0: np.stack([random_spd(rng, p, s) for _ in range(m)])
    z = rng.dirichlet(np.ones(k), size=n)
    return PosteriorState(
        q_x=MvNormalParams(rng.standard_normal((T, p)), batch_spd(T, 3.0)),
        q_tau=GammaParams(rng.uniform(1, 5, n), rng.uniform(0.5, 2, n)),
        q_A=MvNormalParams(rng.standard_normal((n, p)), batch_spd(n, 5.0)),
        q_mu=MvNormalParams(rng.standard_normal((k, p)), batch_spd(k, 2.0)),
        q_Lambda=WishartParams(p + rng.uniform(1, 10, k), batch_spd(k)),
        q_z=z,
        q_rho=DirichletParams(rng.uniform(0.5, 5, k)),
        q_lambda=GammaParams(rng.uniform(0.5, 3, (k, p)), rng.uniform(0.5, 3, (k, p))),
    )


def random_instance(seed, T=6, n=5, p=2, k=3, missing=0.0, w_inv=None):
    rng = np.random.default_rng(seed)
    dataset = random_dataset(rng, T, n, missing)
    hyper = Hyperparameters(p=p, k_max=k, prior_precision=w_inv if w_inv is not None else float(rng.uniform(0.5, 5)))
    return dataset, hyper, random_state(rng, T, n, p, k)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
