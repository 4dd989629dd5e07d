import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ctrlcouple.coupling import (SimConfig, controlled_reflection_coupling, invariant_sampler, reflection_coupling,
                                 simulate_paths, stationary_density_1d, sticky_dominating, two_drift_coupling)
from ctrlcouple.dissipativity import KappaProfile
from ctrlcouple.hjb import Grid1D, solve_backward

from conftest import SQRT2, ou_model

ou = lambda t, x: -x


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(dt=2.0, horizon=1.0)
    with pytest.raises(ValueError):
        SimConfig(n_paths=0)
    with pytest.raises(ValueError):
        SimConfig(merge_threshold=-1.0)
    cfg = SimConfig(dt=0.1, horizon=1.0, out_every=3)
    assert cfg.n_steps == 10 and cfg.out_steps().tolist() == [0, 3, 6, 9, 10]
    assert cfg.delta_merge(2.0) == pytest.approx(0.2 * np.sqrt(0.1))


def test_brownian_variance():
    cfg = SimConfig(dt=0.01, n_paths=40000, horizon=1.0, seed=1)
    ens = simulate_paths(lambda t, x: 0.0 * x, 1.0, 0.0, cfg)
    assert ens.flagged == 0
    assert ens.terminal[:, 0].var() == pytest.approx(1.0, abs=0.03)


@pytest.mark.parametrize("dt", [0.1, 0.05])
def test_ou_variance_matches_euler_recursion(dt):
    cfg = SimConfig(dt=dt, n_paths=100000, horizon=6.0, seed=2)
    x = simulate_paths(ou, SQRT2, 0.0, cfg).terminal[:, 0]
    v = 0.0
    for _ in range(cfg.n_steps):
        v = (1 - dt) ** 2 * v + 2 * dt
    # the scheme variance differs from the exact value 1 by about dt/2
    assert x.var() == pytest.approx(v, abs=0.015)
    assert abs(v - 1.0) == pytest.approx(dt / 2, rel=0.1)


def test_paths_recorded_at_output_steps():
    cfg = SimConfig(dt=0.1, n_paths=5, horizon=1.0, out_every=5)
    ens = simulate_paths(ou, SQRT2, 1.0, cfg, record=True)
    assert ens.paths.shape[0] == 3
    np.testing.assert_array_equal(ens.paths[0], 1.0)


def test_non_finite_paths_are_flagged():
    cfg = SimConfig(dt=0.1, n_paths=50, horizon=1.0)
    with np.errstate(all="ignore"):
        ens = simulate_paths(lambda t, x: x ** 9, 1.0, 5.0, cfg)
    assert ens.flagged > 0
    assert np.all(np.isfinite(ens.terminal))


def test_identical_start_stays_glued():
    cfg = SimConfig(dt=0.01, n_paths=200, horizon=1.0)
    run = reflection_coupling(ou, SQRT2, 0.3, 0.3, cfg)
    assert np.all(run.mean_dist == 0.0) and np.all(run.coalesced_frac == 1.0)
    assert np.all(run.tau == 0.0)


def test_coupled_marginals_are_the_right_diffusions():
    cfg = SimConfig(dt=0.01, n_paths=4000, horizon=1.0, seed=5)
    run = reflection_coupling(ou, SQRT2, 0.0, 1.0, cfg)
    x, y = run.extra["terminal"]
    ref_x = simulate_paths(ou, SQRT2, 0.0, SimConfig(dt=0.01, n_paths=4000, horizon=1.0, seed=99)).terminal
    ref_y = simulate_paths(ou, SQRT2, 1.0, SimConfig(dt=0.01, n_paths=4000, horizon=1.0, seed=98)).terminal
    assert stats.ks_2samp(x[:, 0], ref_x[:, 0]).pvalue > 0.01
    assert stats.ks_2samp(y[:, 0], ref_y[:, 0]).pvalue > 0.01


def test_coalescence_is_monotone():
    cfg = SimConfig(dt=0.01, n_paths=1000, horizon=3.0, seed=4)
    run = reflection_coupling(ou, SQRT2, 0.0, 2.0, cfg)
    assert np.all(np.diff(run.coalesced_frac) >= 0)
    assert run.coalesced_frac[-1] > 0.9
    done = np.isfinite(run.tau)
    assert done.mean() == pytest.approx(run.coalesced_frac[-1])


def test_reflected_increments_keep_law():
    from ctrlcouple.coupling import _reflect
    rng = np.random.default_rng(0)
    dB = rng.standard_normal((200000, 2))
    e = np.tile([[0.6, 0.8]], (dB.shape[0], 1))
    r = _reflect(dB, e)
    np.testing.assert_allclose(r.mean(axis=0), 0.0, atol=0.01)
    np.testing.assert_allclose(np.cov(r.T), np.eye(2), atol=0.02)
    # the component along e flips sign, the orthogonal one is unchanged
    np.testing.assert_allclose(np.sum(r * e, axis=1), -np.sum(dB * e, axis=1))


@settings(max_examples=5)
@given(st.integers(0, 2 ** 32), st.integers(1, 4))
def test_reproducible_across_worker_counts(seed, workers):
    base = dict(dt=0.02, n_paths=300, horizon=0.5, seed=seed, block_size=64)
    a = reflection_coupling(ou, SQRT2, 0.0, 1.0, SimConfig(**base, n_workers=1))
    b = reflection_coupling(ou, SQRT2, 0.0, 1.0, SimConfig(**base, n_workers=workers))
    np.testing.assert_array_equal(a.mean_dist, b.mean_dist)
    np.testing.assert_array_equal(a.tau, b.tau)


def test_sticky_zero_input_stays_at_zero():
    cfg = SimConfig(dt=0.01, n_paths=100, horizon=1.0)
    run = sticky_dominating(KappaProfile.constant(1.0), lambda s: 0.0, SQRT2, 0.0, cfg)
    assert np.all(run.mean_r == 0.0) and np.all(run.zero_frac == 1.0)


def test_sticky_mean_balance():
    # with constant kappa the mean solves m' = M - m (sigma^2/2 = 1), no boundary term
    cfg = SimConfig(dt=1e-3, n_paths=4000, horizon=3.0, seed=3, out_every=500)
    run = sticky_dominating(KappaProfile.constant(1.0), lambda s: 5.0, SQRT2, 0.0, cfg)
    exact = 5.0 * (1 - np.exp(-run.times))
    np.testing.assert_allclose(run.mean_r, exact, atol=4 * run.r_se.max() + 0.02)
    run = sticky_dominating(KappaProfile.constant(1.0), lambda s: 0.0, SQRT2, 2.0, cfg)
    np.testing.assert_allclose(run.mean_r, 2.0 * np.exp(-run.times), atol=4 * run.r_se.max() + 0.02)
    assert np.all(np.diff(run.zero_frac) >= 0)


def test_sticky_gronwall_envelope(unit_bundle):
    T = 2.0
    cfg = SimConfig(dt=1e-3, n_paths=4000, horizon=T, seed=12, out_every=100)
    run = sticky_dominating(KappaProfile.constant(1.0), lambda s: np.exp(-(T - s)), SQRT2, 0.0, cfg,
                            bundle=unit_bundle)
    env = np.exp(-T) * (np.exp(run.times) - 1.0)
    assert np.all(run.mean_f <= env + 3 * run.f_se + 1e-12)
    assert np.all(run.mean_f >= 0)


def test_two_drift_identical_drifts_match_reflection_distance():
    cfg = SimConfig(dt=0.01, n_paths=500, horizon=1.0, seed=8)
    run = two_drift_coupling(ou, ou, SQRT2, 0.5, 0.5, 0.1, cfg)
    assert np.all(run.mean_dist == 0.0)


@pytest.mark.parametrize("eps", [0.05, 0.1])
def test_two_drift_shifted_ou_is_order_eps(eps):
    cfg = SimConfig(dt=0.01, n_paths=2000, horizon=2.0, seed=9)
    delta = SQRT2 * np.sqrt(cfg.dt)
    run = two_drift_coupling(ou, lambda t, x: -x + eps, SQRT2, 0.0, 0.0, delta, cfg)
    # synchronous pairs separate like eps (1 - e^{-t}); reflection only shrinks that
    assert run.mean_dist[-1] <= 2 * eps + delta
    assert np.all(run.coalesced_frac == 0.0)


def test_invariant_sampler_ou_is_standard_normal():
    cfg = SimConfig(dt=0.01, n_paths=20000, horizon=1.0, seed=11)
    s = invariant_sampler(lambda x: -x, SQRT2, 5.0, 1.0, cfg, per_chain=2)
    assert s.size == 40000
    q = stats.norm.ppf((np.arange(s.size) + 0.5) / s.size)
    assert np.mean(np.abs(np.sort(s) - q)) <= 0.02
    assert abs(np.mean(s)) < 0.03


def test_density_table():
    x = np.linspace(-8, 8, 1601)
    d = stationary_density_1d(lambda x: -x, SQRT2, x)
    np.testing.assert_allclose(d.density, stats.norm.pdf(x), atol=1e-8)
    with pytest.raises(ValueError):
        stationary_density_1d(lambda x: 0.0 * x, SQRT2, x)
    with pytest.raises(ValueError):
        stationary_density_1d(lambda x: -x, SQRT2, np.linspace(-1, 1, 101))


def test_controlled_coupling_same_start_has_no_gap():
    g = Grid1D.from_spacing(-6, 6, 0.05)
    m = ou_model(f=True)
    vf = solve_backward(m, m.terminal_cost(g.x[:, None]), 1.0, g)
    cfg = SimConfig(dt=0.01, n_paths=200, horizon=1.0)
    run = controlled_reflection_coupling(m, vf, 0.2, 0.2, cfg)
    assert run.extra["cost_gap_mean"] == 0.0
    with pytest.raises(ValueError):
        controlled_reflection_coupling(m, vf, 0.0, 1.0, SimConfig(dt=0.01, n_paths=10, horizon=2.0))
    with pytest.raises(ValueError):
        controlled_reflection_coupling(ou_model(name="other"), vf, 0.0, 1.0, cfg)
