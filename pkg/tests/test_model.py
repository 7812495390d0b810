import json
import logging

import numpy as np
import pytest

from edgeless.distributions import MvNormalParams
from edgeless.inference import UPDATE_ORDER, apply_update
from edgeless.io import state_from_dict, state_to_dict
from edgeless.model import Dataset, Hyperparameters, ValidationError, expected_outer, validate

from conftest import random_instance


def test_expected_outer_standard_normal():
    np.testing.assert_array_equal(expected_outer(MvNormalParams(np.zeros(2), np.eye(2))), np.eye(2))


def test_expected_outer_arithmetic():
    q = MvNormalParams([1.0, 2.0], np.diag([4.0, 4.0]))
    np.testing.assert_allclose(expected_outer(q), [[1.25, 2.0], [2.0, 4.25]], rtol=1e-14)


def test_expected_outer_monte_carlo():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((3, 3))
    q = MvNormalParams(rng.standard_normal(3), m @ m.T + np.eye(3))
    # independent draws through the covariance Cholesky factor
    v = q.mean + rng.standard_normal((1_000_000, 3)) @ np.linalg.cholesky(np.linalg.inv(q.precision)).T
    outer = np.einsum("ni,nj->nij", v, v).reshape(len(v), -1)
    se = outer.std(axis=0, ddof=1) / np.sqrt(len(v))
    assert np.all(np.abs(outer.mean(axis=0) - expected_outer(q).ravel()) <= 3 * se)


def test_validate_accepts_full_dataset():
    data = Dataset(np.random.default_rng(0).standard_normal((100, 50)))
    validate(data, Hyperparameters(p=2, k_max=5))


def test_validate_names_empty_series():
    values = np.random.default_rng(0).standard_normal((10, 3))
    mask = np.ones_like(values, dtype=bool)
    mask[:, 1] = False
    data = Dataset(values, mask, series_ids=["AAA", "BBB", "CCC"])
    with pytest.raises(ValidationError, match="BBB"):
        validate(data, Hyperparameters(p=1, k_max=1))


@pytest.mark.parametrize("w_inv", [0.0, -1.0])
def test_nonpositive_prior_precision_rejected(w_inv):
    with pytest.raises(ValidationError, match="prior precision must be positive"):
        Hyperparameters(p=1, k_max=1, prior_precision=w_inv)


def test_validate_rejects_nonfinite_observed_cell():
    values = np.ones((4, 2))
    values[2, 1] = np.inf
    with pytest.raises(ValidationError, match="not finite"):
        validate(Dataset(values, np.ones((4, 2), bool)), Hyperparameters(p=1, k_max=1))


def test_validate_warns_when_p_exceeds_data(caplog):
    with caplog.at_level(logging.WARNING):
        validate(Dataset(np.ones((3, 2))), Hyperparameters(p=3, k_max=1))
    assert "under-determined" in caplog.text


def test_dataset_rejects_mismatched_mask():
    with pytest.raises(ValidationError):
        Dataset(np.ones((3, 2)), np.ones((2, 3), bool))


def test_wishart_prior_convention():
    h = Hyperparameters(p=3, k_max=2, prior_precision=4.0)
    np.testing.assert_allclose(h.wishart_prior().mean(), 4.0 * np.eye(3), rtol=1e-14)
    assert h.nu == 3


@pytest.mark.parametrize("seed", range(5))
def test_responsibilities_stay_on_simplex(seed):
    data, hyper, state = random_instance(seed, missing=0.2)
    rng = np.random.default_rng(seed)
    for name in rng.choice(UPDATE_ORDER, size=40):
        apply_update(str(name), state, data, hyper)
        assert np.all(state.q_z >= 0)
        np.testing.assert_allclose(state.q_z.sum(axis=1), 1.0, atol=1e-12)


def _assert_states_identical(a, b):
    da, db = state_to_dict(a), state_to_dict(b)
    assert da.keys() == db.keys()
    for key in da:
        for x, y in zip(_leaves(da[key]), _leaves(db[key])):
            np.testing.assert_array_equal(x, y)


def _leaves(obj):
    if isinstance(obj, dict):
        for k in sorted(obj):
            yield from _leaves(obj[k])
    else:
        yield np.asarray(obj)


@pytest.mark.parametrize("seed", range(3))
def test_state_round_trips_bit_exactly(seed):
    _, _, state = random_instance(seed, T=7, n=6, p=3, k=4)
    text = json.dumps(state_to_dict(state))
    back = state_from_dict(json.loads(text))
    _assert_states_identical(state, back)
    assert json.dumps(state_to_dict(back)) == text
