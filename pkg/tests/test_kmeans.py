import itertools

import numpy as np
import pytest

from edgeless.evaluation import nmi
from edgeless.inference import kmeans_init
from edgeless.kmeans import kmeans
from edgeless.model import ValidationError


def brute_force_bipartition(points):
    """Minimum-SSE split into two non-empty groups by exhaustive search."""
    n = len(points)
    best, best_sse = None, np.inf
    for bits in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + bits)
        if labels.min() == labels.max():
            continue
        sse = sum(((points[labels == j] - points[labels == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        if sse < best_sse:
            best, best_sse = labels, sse
    return best, best_sse


@pytest.mark.parametrize("seed", range(3))
def test_two_clouds_recover_the_optimal_bipartition(seed):
    rng = np.random.default_rng(seed)
    planted = np.repeat([0, 1], 6)
    points = rng.normal(0, 0.1, (12, 2)) + np.where(planted[:, None] == 1, 5.0, -5.0)
    oracle, oracle_sse = brute_force_bipartition(points)
    labels = kmeans_init(points, 2, runs=10, seed=seed)
    assert nmi(labels, planted) == 1.0
    assert nmi(labels, oracle) == 1.0
    assert kmeans(points, 2, runs=10, seed=seed)[2] == pytest.approx(oracle_sse, rel=1e-12)


def test_identical_points_give_zero_sse():
    labels, _, sse = kmeans(np.ones((8, 2)), 3, runs=4, seed=0)
    assert sse == 0.0
    assert len(np.unique(labels)) == 1


def test_one_cluster_per_point_gives_zero_sse():
    points = np.random.default_rng(0).standard_normal((7, 3))
    labels, _, sse = kmeans(points, 7, runs=3, seed=1)
    assert sse == pytest.approx(0.0, abs=1e-24)
    assert len(np.unique(labels)) == 7


def test_best_of_runs_is_deterministic():
    points = np.random.default_rng(3).standard_normal((30, 2))
    a, b = kmeans(points, 4, seed=9), kmeans(points, 4, seed=9)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[2] == b[2]


def test_kmeans_init_rejects_too_many_clusters():
    with pytest.raises(ValidationError):
        kmeans_init(np.zeros((3, 1)), 4)
