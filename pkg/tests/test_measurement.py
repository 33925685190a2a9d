from fractions import Fraction

import numpy as np
import pytest

from dpplan import selection as sel
from dpplan import transform as tf
from dpplan.kernel import BudgetExceeded, ProtectedKernel, init
from dpplan.matrix import Dense, DimensionError, Identity, Prefix, Total
from dpplan.measurement import Measurement, noisy_count, sample_laplace, vector_laplace


def test_sample_laplace_moments():
    rng = np.random.default_rng(0)
    assert abs(sample_laplace(1.0, 10**6, rng).mean()) < 0.01
    assert 7.8 <= sample_laplace(2.0, 10**6, rng).var() <= 8.2
    a = sample_laplace(1.5, 50, np.random.default_rng(9))
    b = sample_laplace(1.5, 50, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.array_equal(sample_laplace(0.0, 3, rng), np.zeros(3))
    with pytest.raises(ValueError):
        sample_laplace(-1.0, 3, rng)


def test_identity_noise_variance():
    n = 10**5
    k = ProtectedKernel.from_vector(np.zeros(n), 1.0, seed=1)
    m = vector_laplace(k, k.root, Identity(n), 1.0)
    assert 1.9 <= m.y.var() <= 2.1
    assert m.noise_scale == 1.0


def test_total_is_unbiased():
    x = np.arange(10.0)
    trials = 10_000
    k = ProtectedKernel.from_vector(x, trials, seed=2)
    ys = np.array([vector_laplace(k, k.root, Total(10), 1.0).y[0] for _ in range(trials)])
    assert abs(ys.mean() - x.sum()) <= 3 * np.sqrt(2.0 / trials)


def test_prefix_noise_scale():
    k = ProtectedKernel.from_vector(np.ones(40), 1.0, seed=0)
    assert vector_laplace(k, k.root, Prefix(40), 0.5).noise_scale == 80.0


@pytest.mark.parametrize("n", [1, 7, 64, 256])
def test_noise_scale_matches_dense_sensitivity(n):
    selectors = [sel.identity_sel(n), sel.total_sel(n), sel.prefix_sel(n), sel.h2_sel(n), sel.hb_sel(n)]
    if n & (n - 1) == 0:
        selectors.append(sel.wavelet_sel(n))
    for Q in selectors:
        k = ProtectedKernel.from_vector(np.zeros(n), 1.0, seed=0)
        m = vector_laplace(k, k.root, Q, 0.25)
        assert m.noise_scale == np.abs(Q.materialize()).sum(axis=0).max() / 0.25


def test_budget_exactness_under_stability():
    k = ProtectedKernel.from_vector(np.ones(3), 10, seed=0)
    t = k.register_transform(k.root, tf.VectorTransform(Dense(np.eye(3) * 3)))
    vector_laplace(k, t, Identity(3), 0.7)
    assert k.spent == Fraction(21, 10)


def test_vector_laplace_errors_and_determinism():
    k = ProtectedKernel.from_vector(np.ones(3), 1.0, seed=0)
    with pytest.raises(DimensionError):
        vector_laplace(k, k.root, Identity(4), 0.5)
    assert k.spent == 0
    runs = []
    for _ in range(2):
        fresh = ProtectedKernel.from_vector(np.ones(3), 1.0, seed=4)
        runs.append(vector_laplace(fresh, fresh.root, Identity(3), 0.5).y)
    assert np.array_equal(runs[0], runs[1])
    vector_laplace(k, k.root, Identity(3), 1.0)
    with pytest.raises(BudgetExceeded):
        vector_laplace(k, k.root, Identity(3), 0.1)


def test_measurement_bundle():
    m = Measurement(Identity(2), [1.0, 2.0], 0.5, "sv0")
    assert m.to_dict()["noise_scale"] == 0.5 and m.to_dict()["y"] == [1.0, 2.0]
    with pytest.raises(DimensionError):
        Measurement(Identity(2), [1.0], 0.5, "sv0")


SCHEMA = tf.Schema((tf.Attribute.categorical("a", ["x", "y"]),))


def test_noisy_count_examples():
    trials = 10_000
    k = init(tf.Table(SCHEMA, []), trials, seed=0)
    assert abs(np.mean([noisy_count(k, k.root, 1.0) for _ in range(trials)])) < 0.05
    k = init(tf.Table(SCHEMA, [("x",)] * 100), 5 * 10**9, seed=0)
    hits = [abs(noisy_count(k, k.root, 1e6) - 100) < 0.01 for _ in range(5000)]
    assert np.mean(hits) > 0.999
    k = init(tf.Table(SCHEMA, [("x",)]), 1.0, seed=0)
    noisy_count(k, k.root, 0.6)
    with pytest.raises(BudgetExceeded):
        noisy_count(k, k.root, 0.6)
