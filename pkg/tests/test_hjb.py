import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctrlcouple.hjb import (Grid1D, HJBError, ValueFunction, ergodic_solve, solve_backward, stability_decay,
                            value_diagnostics)

from conftest import ou_model

COARSE = Grid1D.from_spacing(-4.0, 4.0, 0.1)


def _vf_from(values, x):
    g = Grid1D(float(x[0]), float(x[-1]), x.size)
    vals = np.array([values, values])
    z = np.zeros(2)
    return ValueFunction(g, np.array([0.0, 1.0]), vals, "test", z, z, z, 0, 0)


def test_grid_spacing():
    g = Grid1D.from_spacing(-6, 6, 0.01)
    assert g.n_x == 1201 and g.dx == pytest.approx(0.01)
    with pytest.raises(ValueError):
        Grid1D(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        Grid1D(0.0, 1.0, 2)


def test_diagnostics_linear_and_quadratic():
    x = np.linspace(-1, 1, 201)
    d = value_diagnostics(_vf_from(3 * x, x), 0)
    assert d["lip_norm"] == pytest.approx(3.0) and d["hess_sup"] == pytest.approx(0.0, abs=1e-9)
    d = value_diagnostics(_vf_from(x * x / 2, x), 0)
    assert abs(d["hess_sup"] - 1.0) <= 1e-6


def test_zero_data_gives_zero_solution():
    vf = solve_backward(ou_model(0.0), np.zeros(COARSE.n_x), 1.0, COARSE)
    assert np.all(vf.values == 0.0)


def test_terminal_row_is_g_and_lq_slope():
    g = Grid1D.from_spacing(-6, 6, 0.05)
    vf = solve_backward(ou_model(), lambda x: x[:, 0], 1.0, g)
    np.testing.assert_array_equal(vf.values[-1], g.x)
    assert vf.times[0] == 0.0 and vf.times[-1] == 1.0
    assert value_diagnostics(vf, 0)["lip_norm"] == pytest.approx(np.exp(-1.0), abs=1e-5)
    exact = np.exp(-1.0) * g.x - 0.25 * (1 - np.exp(-2.0))
    np.testing.assert_allclose(vf.values[0], exact, atol=1e-6)


def test_lip_norm_of_smoothed_abs_decays():
    g = Grid1D.from_spacing(-6, 6, 0.05)
    vf = solve_backward(ou_model(), lambda x: np.sqrt(x[:, 0] ** 2 + 0.01), 2.0, g)
    env = np.exp(-(2.0 - vf.step_times))
    assert np.all(vf.step_lip <= env + 1e-3)


@settings(max_examples=15)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2), st.floats(-2, 2))
def test_comparison_principle(a, b, c, m):
    m_ = ou_model(f=True)
    x = COARSE.x
    g = a * np.sin(x) + b * x
    g2 = g + c * np.exp(-(x - m) ** 2)
    v1 = solve_backward(m_, g, 0.3, COARSE).values
    v2 = solve_backward(m_, g2, 0.3, COARSE).values
    assert np.all(v1 <= v2 + 1e-10)


@settings(max_examples=10)
@given(st.floats(-5, 5))
def test_constant_shift(c):
    m_ = ou_model(f=True)
    g = np.sin(COARSE.x)
    v1 = solve_backward(m_, g, 0.3, COARSE).values
    v2 = solve_backward(m_, g + c, 0.3, COARSE).values
    np.testing.assert_allclose(v2 - v1, c, atol=1e-9)


def test_nan_is_reported():
    g = np.zeros(COARSE.n_x)
    g[10] = np.nan
    with pytest.raises(HJBError):
        solve_backward(ou_model(), g, 0.1, COARSE)


def test_clamp_warning():
    with pytest.warns(RuntimeWarning):
        solve_backward(ou_model(), 3.0 * COARSE.x, 0.1, COARSE, grad_clamp=1.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        solve_backward(ou_model(), np.zeros(3), 0.1, COARSE)


def test_csv_export(tmp_path):
    vf = solve_backward(ou_model(), COARSE.x, 0.2, COARSE, store_dt=0.1)
    p = tmp_path / "v.csv"
    vf.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "t,x,value,grad,hess"
    assert len(rows) == 1 + 3 * COARSE.n_x


def test_ergodic_ou_without_state_cost():
    sol = ergodic_solve(ou_model(0.0), COARSE, 1.0, tol=1e-10)
    assert np.max(np.abs(sol.phi_inf)) <= 1e-12
    assert sol.alpha_inf == pytest.approx(0.0, abs=1e-12)


def test_ergodic_fk_symmetric_and_bracketed():
    g = Grid1D.from_spacing(-6, 6, 0.05)
    sol = ergodic_solve(ou_model(f=True), g, 1.0)
    assert sol.residual < 1e-6
    np.testing.assert_allclose(sol.phi_inf, sol.phi_inf[::-1], atol=1e-8)
    # running cost is at least min f = 1; doing nothing costs E sqrt(1+Z^2) = 1.35453
    assert 1.0 < sol.alpha_inf < 1.3545308
    ratios = sol.ratios
    assert all(q < 1 for q in ratios)


def test_ergodic_reports_stall():
    with pytest.raises(HJBError):
        ergodic_solve(ou_model(f=True), COARSE, 1.0, tol=1e-14, max_iter=3)


def test_stability_identical_data_and_linear_gap():
    g = Grid1D.from_spacing(-6, 6, 0.05)
    same = stability_decay(ou_model(), g.x, g.x, 1.0, g)
    assert np.all(same.lip_distance == 0.0)
    cur = stability_decay(ou_model(), g.x, 2 * g.x, 1.0, g)
    np.testing.assert_allclose(cur.lip_distance, np.exp(-(1.0 - cur.times)), atol=1e-6)
