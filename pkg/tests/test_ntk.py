import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fulltarget.ntk import (KernelDataset, KernelUnderflowWarning, class_log_ratio, class_ratio, kernel,
                            median_gamma, ntk_predict, symmetric_pair_dataset, toy_gaussians, verify_assumption1)


@pytest.fixture
def four_points():
    # class 0 on the bottom edge of the unit square, class 1 on the top edge
    x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return KernelDataset(x, np.array([0, 0, 1, 1]), gamma=0.5)


def double_loop_ratio(ds, x, a, b):
    num = den = 0.0
    for s, y in zip(ds.samples, ds.labels):
        k = kernel(x, s, ds.gamma)
        if y == a:
            num += k
        elif y == b:
            den += k
    return num / den


def test_four_point_fixture(four_points):
    # query (1/4, 1/4): squared distances 1/8, 5/8 (class 0) and 5/8, 9/8 (class 1), kernel exp(-d2).
    # class sums factor as exp(-1/8)(1 + e^-1/2) and exp(-5/8)(1 + e^-1/2), so the ratio is e^(1/2)
    # and p0 = 1 / (1 + e^-1/2) = 0.622459331201854564...
    p = ntk_predict(four_points, [0.25, 0.25])
    assert abs(p[0] - 0.6224593312018546) < 1e-9
    assert abs(p[1] - 0.3775406687981454) < 1e-9
    assert abs(class_ratio(four_points, [0.25, 0.25], 0, 1) - math.exp(0.5)) < 1e-9


def test_predictions_are_probabilities(rng):
    ds = toy_gaussians([30, 20, 10], dim=5, seed=2)
    for x in rng.standard_normal((20, 5)) * 3:
        p = ntk_predict(ds, x)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_concentration_at_training_point():
    ds = KernelDataset(np.array([[0.0, 0], [3, 0], [0, 3], [3, 3]]), np.array([0, 1, 2, 3]), gamma=100.0)
    assert ntk_predict(ds, [3.0, 0.0])[1] > 0.999


def test_symmetric_dataset_ratio_exactly_one():
    ds = symmetric_pair_dataset(n=25, dim=6, seed=4)
    n = 25
    for i in range(n):
        x_add = ds.samples[i] + ds.samples[n + i]  # x_b = -x_a
        assert class_ratio(ds, x_add, 0, 1) == 1.0
    # the origin is equidistant from every mirrored pair
    assert class_ratio(ds, np.zeros(6), 0, 1) == 1.0


def test_ratio_matches_double_loop_and_reciprocity(rng):
    ds = toy_gaussians([15, 25], dim=4, seed=1)
    for x in rng.standard_normal((10, 4)):
        r = class_ratio(ds, x, 0, 1)
        assert abs(r - double_loop_ratio(ds, x, 0, 1)) < 1e-9 * max(1.0, r)
        assert abs(r * class_ratio(ds, x, 1, 0) - 1) < 1e-9


def test_kernel_symmetry_and_scale_invariance(rng):
    x, y = rng.standard_normal(7), rng.standard_normal(7)
    assert kernel(x, y, 0.3) == kernel(y, x, 0.3)
    c = 4.0
    assert abs(kernel(x, y, 0.3) - kernel(x / math.sqrt(c), y / math.sqrt(c), 0.3 * c)) < 1e-12
    assert 0 < kernel(x, y, 0.3) <= 1


def test_log_domain_survives_underflow():
    far = KernelDataset(np.array([[100.0], [101.0], [-100.0]]), np.array([0, 0, 1]), gamma=1.0)
    with pytest.warns(KernelUnderflowWarning):
        lr = class_log_ratio(far, [50.0], 0, 1)
    # exact: log((e^{-2*2500} + e^{-2*2601}) / e^{-2*22500})
    want = -5000 + math.log1p(math.exp(-202)) + 45000
    assert abs(lr - want) < 1e-6


def test_balanced_gaussians_near_one():
    ds = toy_gaussians([100, 100], dim=8, seed=0)
    rep = verify_assumption1(ds, trials=300, gamma="auto", seed=1)
    assert 1 / 3 <= rep["geometric_mean"] <= 3
    assert len(rep["ratios"]) == 300


def test_imbalance_pulls_toward_larger_class():
    ds = toy_gaussians([500, 50], dim=8, seed=0)
    rep = verify_assumption1(ds, trials=300, gamma="auto", seed=1, classes=(0, 1))
    assert rep["geometric_mean"] > 3
    rev = verify_assumption1(ds, trials=300, gamma="auto", seed=1, classes=(1, 0))
    assert rev["geometric_mean"] < 1 / 3


def test_errors():
    with pytest.raises(ValueError):
        KernelDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 1.0)
    with pytest.raises(ValueError):
        KernelDataset(np.zeros((2, 2)), np.array([0, 1]), 0.0)
    single = KernelDataset(np.random.rand(5, 2), np.zeros(5, dtype=int), 1.0, 2)
    with pytest.raises(ValueError):
        verify_assumption1(single)
    with pytest.raises(ValueError):
        class_ratio(single, [0, 0], 0, 1)
    with pytest.raises(ValueError):
        class_ratio(single, [0, 0], 0, 0)
    with pytest.raises(ValueError):
        ntk_predict(single, [0, 0, 0])
    with pytest.raises(ValueError):
        median_gamma(np.ones((4, 3)))


def test_median_gamma():
    x = np.array([[0.0], [1.0], [3.0]])  # squared distances 1, 9, 4 -> median 4
    assert median_gamma(x) == pytest.approx(1 / 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_normalisation_property(seed, gamma):
    r = np.random.default_rng(seed)
    ds = KernelDataset(r.standard_normal((12, 3)), r.integers(0, 3, 12), gamma, 3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KernelUnderflowWarning)
        p = ntk_predict(ds, r.standard_normal(3) * 2)
    assert abs(p.sum() - 1) < 1e-9
