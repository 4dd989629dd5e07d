import numpy as np
from hypothesis import given, strategies as st

from ctrlcouple._numerics import cumulative_simpson, golden_section


def test_golden_section_vectorised():
    lo, hi = np.array([-3.0, 0.0]), np.array([3.0, 5.0])
    got = golden_section(lambda v: (v - np.array([1.0, 4.2])) ** 2, lo, hi, tol=1e-12)
    np.testing.assert_allclose(got, [1.0, 4.2], atol=1e-7)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=30),
       st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_cumulative_simpson_exact_for_quadratics(steps, a, b, c):
    x = np.concatenate(([0.0], np.cumsum(steps)))
    y = a + b * x + c * x * x
    exact = a * x + b * x ** 2 / 2 + c * x ** 3 / 3
    np.testing.assert_allclose(cumulative_simpson(x, y), exact, atol=1e-9 * (1 + np.abs(exact).max()))


def test_cumulative_simpson_two_nodes():
    np.testing.assert_allclose(cumulative_simpson([0.0, 2.0], [1.0, 3.0]), [0.0, 4.0])
