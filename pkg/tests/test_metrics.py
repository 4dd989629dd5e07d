import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from ctrlcouple.metrics import fit_exponential_rate, w1_empirical_1d, w1_to_quantiles, wf_bracket

samples = st.lists(st.floats(-100, 100), min_size=1, max_size=20)


def w1_lp(a, b):
    """Brute-force optimal transport between uniform empirical measures."""
    n = len(a)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    A = np.zeros((2 * n, n * n))
    for i, j in itertools.product(range(n), range(n)):
        A[i, i * n + j] = 1
        A[n + j, i * n + j] = 1
    res = linprog(cost, A_eq=A, b_eq=np.full(2 * n, 1.0 / n), bounds=(0, None))
    return res.fun


def test_examples():
    assert w1_empirical_1d([0, 1], [0, 1]) == 0.0
    assert w1_empirical_1d([0], [1]) == 1.0
    assert w1_empirical_1d([1, 2, 3], [2, 3, 4]) == pytest.approx(w1_lp(np.array([1., 2, 3]), np.array([2., 3, 4])))
    with pytest.raises(ValueError):
        w1_empirical_1d([], [1.0])


@given(st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-10, 10), min_size=n, max_size=n), st.lists(st.floats(-10, 10), min_size=n, max_size=n))))
def test_matches_linear_program(ab):
    a, b = map(np.array, ab)
    assert w1_empirical_1d(a, b) == pytest.approx(w1_lp(a, b), abs=1e-7)


@given(st.integers(1, 20).flatmap(lambda n: st.tuples(*[st.lists(st.floats(-100, 100), min_size=n, max_size=n)] * 3)),
       st.floats(-50, 50))
def test_metric_properties(abc, shift):
    a, b, c = map(np.array, abc)
    assert w1_empirical_1d(a, b) == w1_empirical_1d(b, a)
    assert w1_empirical_1d(a, c) <= w1_empirical_1d(a, b) + w1_empirical_1d(b, c) + 1e-12
    assert w1_empirical_1d(a + shift, b + shift) == pytest.approx(w1_empirical_1d(a, b), abs=1e-9)


def test_unequal_sizes_subsample():
    d, how = w1_empirical_1d(np.zeros(10), np.ones(4), return_method=True)
    assert how == "subsampled" and d == 1.0


def test_bracket_examples(unit_bundle):
    assert wf_bracket([0.5, 2.0], [2.0, 0.5], unit_bundle) == (0.0, 0.0)
    lo, hi = wf_bracket([0.0], [1.0], unit_bundle)
    assert lo == pytest.approx(0.1767766953) and hi == pytest.approx(0.9791666667)


@given(st.integers(1, 30).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-20, 20), min_size=n, max_size=n), st.lists(st.floats(-20, 20), min_size=n, max_size=n))))
def test_bracket_ordering(unit_bundle, ab):
    a, b = map(np.array, ab)
    lo, hi = wf_bracket(a, b, unit_bundle)
    assert lo <= hi + 1e-12
    same = np.array_equal(np.sort(a), np.sort(b))
    assert (hi == 0.0) == same


def test_w1_to_quantiles_of_normal():
    x = np.linspace(-8, 8, 4001)
    dens = np.exp(-x * x / 2) / np.sqrt(2 * np.pi)
    rng = np.random.default_rng(1)
    assert w1_to_quantiles(rng.standard_normal(100000), x, dens) < 0.01
    assert w1_to_quantiles(rng.standard_normal(100000) + 0.5, x, dens) == pytest.approx(0.5, abs=0.02)


def test_rate_fits():
    s = np.linspace(0, 5, 51)
    f = fit_exponential_rate(s, np.exp(-0.5 * s))
    assert f.rate == pytest.approx(0.5) and f.r_squared == pytest.approx(1.0)
    f = fit_exponential_rate(s, 2 * np.exp(-0.5 * s))
    assert f.intercept == pytest.approx(np.log(2))
    rng = np.random.default_rng(3)
    f = fit_exponential_rate(s, np.exp(-0.5 * s) * (1 + 0.01 * rng.standard_normal(s.size)))
    assert abs(f.rate - 0.5) <= 0.02
    with pytest.raises(ValueError):
        fit_exponential_rate(s, np.cos(s))
    f = fit_exponential_rate(s, np.exp(-s), window=(1.0, 2.0))
    assert f.window == (1.0, 2.0) and f.rate == pytest.approx(1.0)
