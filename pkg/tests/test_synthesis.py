import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from edgeless.model import Dataset, ValidationError
from edgeless.synthesis import (
    GeneratorConfig,
    config_for_separation,
    generate,
    mask_random,
    separation,
    sierpinski_layout,
    triad_labels,
)


def test_mixture_instance_shape_and_labels():
    inst = generate(GeneratorConfig(n=50, T=100, p=2, K=5, seed=0))
    assert inst.dataset.values.shape == (100, 50)
    assert set(inst.true_labels) <= set(range(1, 6))
    assert inst.true_A.shape == (50, 2)


def test_within_community_spread_matches_wishart_mean():
    # precisions ~ Wishart(50, I) have mean 50 I, so loadings scatter by about 1/sqrt(50)
    spreads = []
    for seed in range(40):
        inst = generate(GeneratorConfig(n=50, T=5, p=2, K=5, seed=seed))
        spreads.append((inst.true_A - inst.true_mu[inst.true_labels - 1]).std())
    assert np.mean(spreads) == pytest.approx(1 / np.sqrt(50), rel=0.05)


def test_very_precise_communities_share_loadings():
    inst = generate(GeneratorConfig(n=30, T=5, K=3, wishart_nu=None, within_precision=1e8, seed=2))
    for k in range(1, 4):
        members = inst.true_A[inst.true_labels == k]
        assert np.abs(members - members[0]).max() < 1e-3


def test_column_covariance_approaches_model_covariance():
    inst = generate(GeneratorConfig(n=3, T=400_000, p=2, K=1, seed=5))
    A, tau = inst.true_A, inst.true_tau
    expected = A @ A.T + np.diag(1 / tau)
    y = inst.dataset.values
    emp = np.cov(y, rowvar=False)
    # sampling standard error of a Gaussian covariance entry
    se = np.sqrt((np.outer(np.diag(expected), np.diag(expected)) + expected**2) / len(y))
    assert np.all(np.abs(emp - expected) <= 4 * se)


def test_generation_is_byte_identical_for_equal_seeds():
    cfg = GeneratorConfig(n=20, T=30, seed=11)
    a, b = generate(cfg), generate(cfg)
    assert a.dataset.values.tobytes() == b.dataset.values.tobytes()
    np.testing.assert_array_equal(a.true_labels, b.true_labels)
    assert generate(GeneratorConfig(n=20, T=30, seed=12)).dataset.values.tobytes() != a.dataset.values.tobytes()


def test_label_frequencies_follow_size_distribution():
    rho = np.array([0.2, 0.3, 0.5])
    inst = generate(GeneratorConfig(n=10_000, T=1, p=1, K=3, size_distribution=tuple(rho), seed=0))
    counts = np.bincount(inst.true_labels, minlength=4)[1:]
    assert stats.chisquare(counts, rho * 10_000).pvalue > 1e-3


def test_balanced_sizes_are_exact():
    inst = generate(GeneratorConfig(n=45, T=2, K=9, community_layout="sierpinski", balanced=True, seed=0))
    assert np.all(np.bincount(inst.true_labels)[1:] == 5)


# -- separation -------------------------------------------------------------------


@pytest.mark.parametrize("var_mu, h", [(0.1, 1.0), (1.6, 4.0)])
def test_separation_arithmetic(var_mu, h):
    cfg = GeneratorConfig(wishart_nu=None, within_precision=10.0, mean_variance=var_mu)
    assert separation(cfg) == pytest.approx(h, rel=1e-12)


def test_mixture_setup_is_well_separated():
    # E[Lambda] = 50 from Wishart(50, I), unit variance of the means
    h = separation(GeneratorConfig(n=50, K=5, p=2, wishart_nu=50.0, mean_variance=1.0))
    assert h == pytest.approx(np.sqrt(50), rel=1e-12)
    assert 6.5 < h < 7.5


@given(st.floats(1e-3, 1e3), st.floats(0.1, 100.0))
@settings(max_examples=50, deadline=None)
def test_separation_is_scale_invariant(c, h):
    base = config_for_separation(h, within_precision=10.0)
    scaled = config_for_separation(h, within_precision=10.0 * c)
    assert separation(scaled) == pytest.approx(separation(base), rel=1e-12)
    assert scaled.within_precision * scaled.mean_variance == pytest.approx(base.within_precision * base.mean_variance)


# -- sierpinski layout ------------------------------------------------------------


def test_sierpinski_has_nine_points():
    assert sierpinski_layout(2, 1.0).shape == (9, 2)


@pytest.mark.parametrize("scale", [1.0, 2.5])
def test_sierpinski_distance_set(scale):
    # triads are unit triangles shrunk by 3, centred on a unit triangle; by the
    # law of cosines cross-triad distances are |d1 + d2 / 3| with |d1| = 1,
    # |d2| in {0, 1} and cos(d1, d2) in {1, 1/2, -1/2, -1}
    expected = scale * np.array([1 / 3, 2 / 3, np.sqrt(7) / 3, 1.0, np.sqrt(13) / 3, 4 / 3])
    pts = sierpinski_layout(2, scale)
    dists = [np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2)]
    found = np.unique(np.round(dists, 9))
    np.testing.assert_allclose(found, np.sort(expected), rtol=1e-9)
    # within-triad pairs are exactly the shortest distance
    for t in range(3):
        tri = pts[3 * t : 3 * t + 3]
        for a, b in itertools.combinations(tri, 2):
            assert np.linalg.norm(a - b) == pytest.approx(scale / 3)


def test_sierpinski_centroids_agree():
    pts = sierpinski_layout(2, 1.7)
    triads = pts.reshape(3, 3, 2).mean(axis=1)
    np.testing.assert_allclose(pts.mean(axis=0), triads.mean(axis=0), atol=1e-14)


def test_triad_labels():
    np.testing.assert_array_equal(triad_labels(np.arange(1, 10)), [1, 1, 1, 2, 2, 2, 3, 3, 3])


def test_sierpinski_requires_nine_planar_communities():
    with pytest.raises(ValidationError):
        GeneratorConfig(community_layout="sierpinski", K=5)


# -- masking ----------------------------------------------------------------------


def _full(T=100, n=50):
    return Dataset(np.random.default_rng(0).standard_normal((T, n)))


def test_mask_fraction_zero_is_identity():
    d = _full()
    out = mask_random(d, 0.0, seed=1)
    np.testing.assert_array_equal(out.mask, d.mask)
    np.testing.assert_array_equal(out.values, d.values)


def test_mask_fraction_counts_cells():
    out = mask_random(_full(), 0.1, seed=1)
    assert (~out.mask).sum() == 500


def test_mask_is_deterministic():
    d = _full()
    np.testing.assert_array_equal(mask_random(d, 0.1, seed=3).mask, mask_random(d, 0.1, seed=3).mask)
    assert not np.array_equal(mask_random(d, 0.1, seed=3).mask, mask_random(d, 0.1, seed=4).mask)


def test_mask_never_empties_a_series():
    out = mask_random(_full(T=4, n=10), 0.5, seed=0)
    assert out.mask.any(axis=0).all()


def test_mask_rejects_bad_fraction():
    with pytest.raises(ValidationError):
        mask_random(_full(), 1.0)
