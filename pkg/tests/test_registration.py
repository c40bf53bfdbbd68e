import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import pcloop.registration as reg
from pcloop.errors import InsufficientCorrespondences, NoConsensus
from pcloop.geometry import RigidTransform, apply, transform_error
from pcloop.matching import CorrespondenceSet
from pcloop.registration import RansacConfig, count_inliers, ransac_register, sample_indices
from pcloop.synthetic import random_transform


def identity_pairs(n):
    return CorrespondenceSet(np.column_stack([np.arange(n), np.arange(n)]), n, n)


def planted(seed, n=100, n_in=None, sigma=0.0):
    rng = np.random.default_rng(seed)
    T0 = random_transform(rng, np.pi, 10.0)
    Pc = rng.uniform(-2, 2, size=(n, 3))
    Pq = apply(T0, Pc) + rng.normal(scale=sigma, size=(n, 3)) if sigma else apply(T0, Pc)
    n_in = n if n_in is None else n_in
    Pq[n_in:] = T0.translation + rng.uniform(-2, 2, size=(n - n_in, 3))
    return Pq, Pc, identity_pairs(n), T0


def test_config_validation():
    for bad in ({"max_iterations": 0}, {"inlier_threshold": 0.0}, {"sample_size": 2}, {"confirmation_iterations": -1}):
        with pytest.raises(ValueError):
            RansacConfig(**bad)
    cfg = RansacConfig()
    assert (cfg.max_iterations, cfg.confirmation_iterations, cfg.inlier_threshold) == (500_000, 1_000, 0.03)


def test_exact_correspondences():
    Pq, Pc, C, T0 = planted(1)
    res = ransac_register(Pq, Pc, C)
    rot, trans = transform_error(res.transform, T0)
    assert np.degrees(rot) < 0.1 and trans < 1e-3
    assert len(res.inlier_pairs) == 100
    assert res.inlier_rmse < 1e-9


def test_planted_inliers_with_outliers():
    Pq, Pc, C, T0 = planted(2, n=100, n_in=60, sigma=0.01)
    res = ransac_register(Pq, Pc, C, RansacConfig(inlier_threshold=0.03))
    rot, trans = transform_error(res.transform, T0)
    assert np.degrees(rot) < 1.0 and trans < 0.03
    assert set(res.inlier_pairs.query_indices.tolist()) <= set(range(60))
    assert res.inlier_rmse <= 0.03


def test_all_outliers_no_consensus():
    rng = np.random.default_rng(3)
    Pq = rng.uniform(-5, 5, size=(30, 3))
    Pc = rng.uniform(-5, 5, size=(30, 3))
    with pytest.raises(NoConsensus):
        ransac_register(Pq, Pc, identity_pairs(30), RansacConfig(max_iterations=5000))


def test_too_few_correspondences():
    with pytest.raises(InsufficientCorrespondences):
        ransac_register(np.zeros((2, 3)), np.zeros((2, 3)), identity_pairs(2))


def test_deterministic_and_batch_independent(monkeypatch):
    Pq, Pc, C, _ = planted(4, n=80, n_in=45, sigma=0.01)
    cfg = RansacConfig(seed=9, max_iterations=3000, confirmation_iterations=200)
    a = ransac_register(Pq, Pc, C, cfg)
    b = ransac_register(Pq, Pc, C, cfg)
    monkeypatch.setattr(reg, "_BATCH_ENTRIES", 1)
    c = ransac_register(Pq, Pc, C, cfg)
    for r in (b, c):
        assert r.transform == a.transform
        assert r.inlier_pairs.as_set() == a.inlier_pairs.as_set()
        assert r.iterations_used == a.iterations_used
        assert r.inlier_rmse == a.inlier_rmse


def test_early_termination():
    Pq, Pc, C, _ = planted(5)
    res = ransac_register(Pq, Pc, C, RansacConfig(confirmation_iterations=100))
    # every hypothesis is exact, so the first one is never beaten
    assert res.iterations_used <= 102
    res = ransac_register(Pq, Pc, C, RansacConfig(max_iterations=50, confirmation_iterations=1000))
    assert res.iterations_used == 50


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_refit_never_worse_than_hypothesis(seed):
    Pq, Pc, C, _ = planted(seed, n=60, n_in=40, sigma=0.01)
    res = ransac_register(Pq, Pc, C, RansacConfig(seed=seed, max_iterations=2000, confirmation_iterations=200))
    assert res.inlier_rmse <= res.hypothesis_rmse + 1e-12
    assert res.inlier_pairs.as_set() <= C.as_set()
    R = res.transform.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9


@given(st.integers(0, 2**64 - 1), st.integers(3, 200), st.integers(3, 6))
def test_sample_indices_distinct_in_range(seed, n, k):
    k = min(k, n)
    s = sample_indices(seed, np.arange(64), n, k)
    assert s.shape == (64, k)
    assert s.min() >= 0 and s.max() < n
    assert all(len(set(row)) == k for row in s.tolist())
    assert np.array_equal(s[10:20], sample_indices(seed, np.arange(10, 20), n, k))


def test_sample_indices_roughly_uniform():
    s = sample_indices(0, np.arange(30000), 10, 3)
    counts = np.bincount(s.ravel(), minlength=10)
    assert np.abs(counts / counts.sum() - 0.1).max() < 0.01


def test_count_inliers_examples():
    Pq, Pc, C, T0 = planted(6, n=20)
    assert count_inliers(Pq, Pc, C, T0, 0.03)[0] == 20
    assert count_inliers(Pq, Pc, C, T0, 0.03)[1] < 1e-12
    assert count_inliers(np.zeros((20, 3)) + 10.0, np.zeros((20, 3)), identity_pairs(20), RigidTransform.identity(), 0.03) == (0, 0.0)
    q = np.zeros((3, 3))
    c = np.array([[0.01, 0, 0], [0, 0.05, 0], [0, 0, 0.10]])
    cnt, rmse = count_inliers(q, c, identity_pairs(3), RigidTransform.identity(), 0.03)
    assert cnt == 1 and rmse == pytest.approx(0.01)
