import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctrlcouple.dissipativity import (KappaProbe, KappaProfile, QuadratureError, check_in_K, estimate_kappa,
                                      negpart_integral, perturb_with_inverse_r, two_regime_profile)

from conftest import SQRT2


def test_constant_profile_is_in_K():
    rep = check_in_K(KappaProfile.constant(1.0))
    assert rep.in_K and rep.tail_infimum == 1.0 and rep.negpart_integral == 0.0


def test_negative_constant_is_not_in_K():
    assert not check_in_K(KappaProfile.constant(-1.0)).in_K


@pytest.mark.parametrize("c, want", [(4.0, 3.5), (7.0, 6.5)])
def test_inverse_r_negative_part(c, want):
    # int_0^1 r (c/r - 1) dr = c - 1/2 when c >= 1
    prof = KappaProfile(lambda r: 1.0 - c / r)
    assert negpart_integral(prof) == pytest.approx(want, abs=1e-7)


def test_non_integrable_singularity_raises():
    with pytest.raises(QuadratureError):
        negpart_integral(KappaProfile(lambda r: -1.0 / r ** 2))


def test_estimate_matches_closed_form_for_tanh_drift():
    # b = -x + tanh x, sigma = sqrt 2: worst alignment at distance r is 1 - 2 tanh(r/2)/r
    r = np.linspace(0.05, 6.0, 60)
    prof = estimate_kappa(lambda x: -x + np.tanh(x), SQRT2, r, KappaProbe(x_box=5.0, n_points=2001))
    np.testing.assert_allclose(prof(r), 1.0 - 2.0 * np.tanh(r / 2.0) / r, atol=1e-12)
    assert prof.provenance == "estimated" and not prof.certified


def test_estimate_for_linear_drift_is_exact():
    r = np.geomspace(0.01, 10, 30)
    prof = estimate_kappa(lambda x: -x, SQRT2, r, KappaProbe(n_points=101))
    np.testing.assert_allclose(prof(r), 1.0, atol=1e-12)


def test_estimate_controlled_and_multidim():
    r = np.array([0.5, 1.0])
    probe = KappaProbe(state_dim=2, control_dim=2, u_box=1.0, n_points=50, n_directions=4)
    prof = estimate_kappa(lambda x, u: -2 * x + u, 1.0, r, probe)
    np.testing.assert_allclose(prof(r), 4.0, atol=1e-12)


def test_estimate_rejects_bad_grid():
    with pytest.raises(ValueError):
        estimate_kappa(lambda x: -x, 1.0, np.array([1.0, 0.5]), KappaProbe())


def test_zero_perturbation_is_identity():
    p = KappaProfile.constant(1.0)
    assert perturb_with_inverse_r(p, 0.0) is p
    with pytest.raises(ValueError):
        perturb_with_inverse_r(p, -1.0)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_perturbations_add_up(c1, c2):
    base = two_regime_profile(1.0, 0.5, 1.0, SQRT2)
    twice = perturb_with_inverse_r(perturb_with_inverse_r(base, c1), c2)
    once = perturb_with_inverse_r(base, c1 + c2)
    r = np.geomspace(1e-3, 100, 50)
    np.testing.assert_allclose(twice(r), once(r), rtol=1e-12, atol=1e-12)


@given(st.floats(0.0, 60.0))
def test_perturbed_constant_stays_in_K(c):
    assert check_in_K(perturb_with_inverse_r(KappaProfile.constant(1.0), c)).in_K


def test_csv_round_trip(tmp_path):
    r = np.linspace(0.1, 5, 20)
    prof = KappaProfile.tabulated(r, 1.0 - 1.0 / r, provenance="analytic")
    path = tmp_path / "k.csv"
    prof.to_csv(path)
    back = KappaProfile.from_csv(path)
    np.testing.assert_allclose(back(r), prof(r), rtol=1e-10, atol=1e-10)
