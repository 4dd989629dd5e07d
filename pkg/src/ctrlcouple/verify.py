"""Acceptance checks as library functions.

Each check returns a CheckResult with the measured numbers next to the
thresholds they were held to. Wall-clock times are deliberately left out so
reports stay byte-identical between runs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import trapezoid

from . import __version__
from .coupling import (SimConfig, controlled_reflection_coupling, invariant_sampler, reflection_coupling,
                       simulate_paths, stationary_density_1d, two_drift_coupling)
from .dissipativity import KappaProfile, check_in_K, perturb_with_inverse_r, two_regime_profile
from .hjb import (Grid1D, ergodic_drift, ergodic_solve, optimal_feedback_drift, solve_backward,
                  stability_decay, value_diagnostics)
from .metrics import fit_exponential_rate, w1_to_quantiles
from .model import FkExampleParams, make_example_fk
from .rates import (build_ledger, coefficient_bounds, compute_rate_bundle, gradient_bounds, hessian_bound,
                    perturbation_forward, perturbation_stab)
from .scenario import Scenario, scenario_from_dict

log = logging.getLogger(__name__)

SQRT2 = float(np.sqrt(2.0))


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)


class Context:
    """Objects shared between checks, built on first use."""

    def __init__(self, sc: Scenario, n_workers=None):
        self.sc = sc
        self.workers = int(n_workers or sc.sim.n_workers)
        self.bundles = []
        self._vfs = {}

    def bundle(self, profile, label, sigma=None):
        b = compute_rate_bundle(profile, self.sc.model.sigma if sigma is None else sigma)
        self.bundles.append((label, b))
        return b

    def cfg(self, **kw):
        kw.setdefault("seed", self.sc.sim.seed)
        kw.setdefault("n_workers", self.workers)
        kw.setdefault("block_size", self.sc.sim.block_size)
        return SimConfig(**kw)

    @cached_property
    def model(self):
        return self.sc.build_model()

    @cached_property
    def model2(self):
        return self.sc.build_model(self.sc.model.g2_slope)

    @cached_property
    def grid(self):
        return self.sc.grid1d()

    @cached_property
    def base(self):
        return self.bundle(self.sc.profile(), "scenario drift")

    @cached_property
    def ledger(self):
        return build_ledger(self.model, self.base, M_g2_x=abs(self.sc.model.g2_slope))

    def vf(self, which, T):
        key = (which, float(T))
        if key not in self._vfs:
            m = self.model if which == 1 else self.model2
            slope = self.sc.model.g_slope if which == 1 else self.sc.model.g2_slope
            g = slope * self.grid.x
            self._vfs[key] = solve_backward(m, g, T, self.grid, store_dt=T / 200.0, terminal_tag=f"{slope:g} x")
        return self._vfs[key]

    @cached_property
    def ergodic(self):
        v = self.sc.verify
        return ergodic_solve(self.model, self.grid, 1.0, tol=v.ergodic_tol, max_iter=v.ergodic_max_iter)

    @cached_property
    def mu_inf(self):
        g = self.sc.grid
        xs = np.linspace(2.0 * g.x_min, 2.0 * g.x_max, 4801)
        return stationary_density_1d(ergodic_drift(self.model, self.ergodic), self.sc.model.sigma, xs)


def _ou_model(g_slope=1.0, name="ou"):
    return make_example_fk(FkExampleParams(alpha=1.0, sigma=SQRT2, g_terminal=lambda x: g_slope * x[:, 0],
                                           g_lip=abs(g_slope), name=name))


def _const_bundle(ctx):
    return ctx.bundle(KappaProfile.constant(1.0), "constant 1", sigma=SQRT2)


# ---------------------------------------------------------------- checks

def check_rate_closed_form(ctx):
    b = _const_bundle(ctx)
    want = {"R1": 2 * SQRT2, "lambda": 0.5, "C": 1.0 / (4 * SQRT2), "f_at_1": 1.0 - 1.0 / 48.0}
    got = {"R1": b.R1, "lambda": b.lam, "C": b.C, "f_at_1": float(b.f_eval(1.0))}
    rel = {k: abs(got[k] - want[k]) / abs(want[k]) for k in want}
    ok = b.R0 == 0.0 and max(rel.values()) <= 1e-6
    return CheckResult(1, "rate bundle closed form", ok, {"R0": b.R0, **got, "max_rel_error": max(rel.values())})


def _random_pair(rng, kind):
    if kind == 0:
        a = rng.uniform(0.3, 2.0)
        d = rng.uniform(0.01, a - 0.1)
        return KappaProfile.constant(a), KappaProfile.constant(a - d)
    kf, L, R = rng.uniform(0.5, 2.0), rng.uniform(0.0, 1.0), rng.uniform(0.5, 2.0)
    P = two_regime_profile(kf, L, R, SQRT2)
    if kind == 1:
        c1, c2 = rng.uniform(0.0, 1.0), rng.uniform(0.05, 1.0)
        return perturb_with_inverse_r(P, c1), perturb_with_inverse_r(P, c1 + c2)
    return P, two_regime_profile(kf, L + rng.uniform(0.05, 1.0), R, SQRT2)


def check_monotone(ctx):
    n = ctx.sc.verify.monotone_pairs
    rng = np.random.default_rng([ctx.sc.sim.seed, 2])
    r_probe = np.geomspace(1e-3, 50.0, 200)
    viol, unordered, outside = 0, 0, 0
    for i in range(n):
        hi, lo = _random_pair(rng, i % 3)
        if np.any(hi(r_probe) < lo(r_probe)):
            unordered += 1
        if not (check_in_K(hi).in_K and check_in_K(lo).in_K):
            outside += 1
        bh = ctx.bundle(hi, f"pair {i} upper", sigma=SQRT2)
        bl = ctx.bundle(lo, f"pair {i} lower", sigma=SQRT2)
        if bh.lam < bl.lam * (1 - 1e-10) or bh.C < bl.C * (1 - 1e-10):
            viol += 1
    ok = viol == 0 and unordered == 0 and outside == 0 and n >= 1
    return CheckResult(2, "monotonicity of (lambda, C) in kappa", ok,
                       {"pairs": n, "violations": viol, "unordered_pairs": unordered, "outside_K": outside})


def check_inequality(ctx):
    """Residual of the differential inequality over every bundle the run built, plus the ledger's."""
    sigma = ctx.sc.model.sigma
    tp = ctx.ledger.turnpike or {}
    for key in ("c_inf", "c_tilde", "c_fwd", "c_stab"):
        if key in tp:
            ctx.bundle(perturb_with_inverse_r(ctx.base.profile, tp[key]), f"ledger {key}", sigma=sigma)
    worst = max(b.inequality_residual() for _, b in ctx.bundles)
    label = max(ctx.bundles, key=lambda lb: lb[1].inequality_residual())[0]
    return CheckResult(3, "differential inequality on all bundles", worst <= 1e-8,
                       {"bundles": len(ctx.bundles), "max_residual": worst, "worst_bundle": label})


def check_hjb_oracle(ctx):
    v = ctx.sc.verify
    m = _ou_model(1.0, "lq")
    exact = lambda x: np.exp(-1.0) * x - 0.25 * (1.0 - np.exp(-2.0))
    errs = []
    for k in (1, 2):
        grid = Grid1D.from_spacing(-6.0, 6.0, v.hjb_oracle_dx / k)
        vf = solve_backward(m, grid.x.copy(), 1.0, grid, dt=v.hjb_oracle_dt / k, store_dt=1.0)
        errs.append(float(np.max(np.abs(vf.values[0] - exact(grid.x)))))
    ratio = errs[0] / errs[1] if errs[1] > 0 else float("inf")
    ok = errs[0] <= 5e-3 and ratio >= 3.0
    return CheckResult(4, "HJB solver against the linear-quadratic oracle", ok,
                       {"dx": v.hjb_oracle_dx, "dt": v.hjb_oracle_dt, "sup_error": errs[0],
                        "sup_error_refined": errs[1], "ratio": ratio})


def check_gradient_bound(ctx):
    T = ctx.sc.verify.hjb_horizon
    vf = ctx.vf(1, T)
    c = ctx.model.constants
    bound, _ = gradient_bounds(c.M_F_x, c.M_g_x, ctx.base, T - vf.step_times)
    slack = vf.step_lip - bound
    return CheckResult(5, "value gradient below its bound", bool(np.all(slack <= 1e-2)),
                       {"steps": int(vf.step_lip.size), "max_lip": float(vf.step_lip.max()),
                        "min_bound": float(bound.min()), "max_excess": float(slack.max())})


def check_hessian_bound(ctx):
    T = ctx.sc.verify.hjb_horizon
    vf = ctx.vf(1, T)
    m = ctx.model
    c = m.constants
    _, M = gradient_bounds(c.M_F_x, c.M_g_x, ctx.base, 0.0)
    coeffs = coefficient_bounds(c, M, m.omega)
    fwd = ctx.bundle(perturb_with_inverse_r(ctx.base.profile, perturbation_forward(c, m.sigma, M, m.omega)),
                     "forward perturbation")
    worst, measured, bounds = -np.inf, [], []
    for k, t in enumerate(vf.times):
        if t > T - 0.1 + 1e-12:
            continue
        hs = value_diagnostics(vf, k)["hess_sup"]
        bd, _ = hessian_bound(coeffs, c.M_g_x, fwd, T - t)
        measured.append(hs)
        bounds.append(bd)
        worst = max(worst, hs - bd)
    return CheckResult(6, "value Hessian below its bound", bool(worst <= 5e-2),
                       {"times": len(measured), "max_hess": max(measured), "min_bound": min(bounds),
                        "max_excess": float(worst)})


def check_value_contraction(ctx):
    T = ctx.sc.verify.hjb_horizon
    m = _ou_model(1.0, "ou")
    curve = stability_decay(m, ctx.grid.x.copy(), 2.0 * ctx.grid.x, T, ctx.grid, store_dt=T / 100.0)
    err = float(np.max(np.abs(curve.lip_distance - np.exp(-(T - curve.times)))))
    fit = fit_exponential_rate(T - curve.times, curve.lip_distance)
    c = m.constants
    base = _const_bundle(ctx)
    _, M1 = gradient_bounds(0.0, 1.0, base, 0.0)
    _, M2 = gradient_bounds(0.0, 2.0, base, 0.0)
    stab = ctx.bundle(perturb_with_inverse_r(base.profile, perturbation_stab(c, m.sigma, M1, M2, m.omega)),
                      "OU stability perturbation", sigma=SQRT2)
    ok = err <= 1e-2 and fit.rate >= stab.lam
    return CheckResult(7, "contraction of value functions in the terminal cost", ok,
                       {"max_error_vs_exp": err, "fitted_rate": fit.rate, "r_squared": fit.r_squared,
                        "ledger_lambda": stab.lam})


def check_coupling_contraction(ctx):
    v = ctx.sc.verify
    b = _const_bundle(ctx)
    x, x2 = 0.0, 1.0
    cfg = ctx.cfg(dt=v.coupling_dt, n_paths=v.coupling_paths, horizon=v.coupling_horizon,
                  out_every=max(1, int(round(0.05 / v.coupling_dt))))
    run = reflection_coupling(lambda t, y: -y, SQRT2, x, x2, cfg, bundle=b)
    s = run.times
    env = float(b.f_eval(abs(x2 - x))) * np.exp(-b.lam * s)
    excess_f = run.mean_f - env - 3.0 * run.f_se
    surv = run.survival()
    n = cfg.n_paths - run.flagged
    se_surv = np.sqrt(surv * (1.0 - surv) / n)
    with np.errstate(divide="ignore"):
        env_s = np.where(s > 0, b.lam / b.C * abs(x2 - x) / np.expm1(b.lam * s), np.inf)
    excess_s = surv - np.minimum(env_s, np.inf) - 3.0 * se_surv
    ok = bool(np.all(excess_f <= 1e-12) and np.all(excess_s[s > 0] <= 1e-12) and run.flagged == 0)
    return CheckResult(8, "reflection coupling contraction and coalescence", ok,
                       {"paths": cfg.n_paths, "dt": cfg.dt, "times": int(s.size),
                        "max_excess_Ef": float(excess_f.max()), "max_excess_survival": float(excess_s[s > 0].max()),
                        "final_mean_f": float(run.mean_f[-1]), "final_survival": float(surv[-1]),
                        "delta_merge": run.extra["delta_merge"]})


def check_controlled_coupling(ctx):
    v = ctx.sc.verify
    sc = ctx.sc
    T = v.hjb_horizon
    vf = ctx.vf(1, T)
    b = ctx.base
    x, x2 = sc.sim.x0, sc.sim.x1
    cfg = ctx.cfg(dt=v.coupling_dt, n_paths=v.controlled_paths, horizon=T,
                  out_every=max(1, int(round(0.05 / v.coupling_dt))))
    run = controlled_reflection_coupling(ctx.model, vf, x, x2, cfg, bundle=b)
    c = ctx.model.constants
    g_f = c.M_g_x * b.twisted_lip_factor
    decay = np.exp(-b.lam * T)
    upper = float(b.f_eval(abs(x2 - x))) * (c.M_F_x * (1.0 - decay) / (b.lam * b.C) + g_f * decay)
    lower = float(vf.value_at(0, x2) - vf.value_at(0, x))
    m, se = run.extra["cost_gap_mean"], run.extra["cost_gap_se"]
    ok = m <= upper + 3 * se and m >= lower - 3 * se
    return CheckResult(9, "controlled reflection coupling cost gap", ok,
                       {"mean_gap": m, "se": se, "upper_envelope": upper, "value_difference": lower,
                        "paths": cfg.n_paths})


def check_ergodic(ctx):
    v = ctx.sc.verify
    sol = ctx.ergodic
    lam = ctx.ledger.stability_lambda
    ratios = sol.ratios
    cap = float(np.exp(-lam)) + 0.05
    ok = sol.residual < 1e-6 and sol.iterations <= v.ergodic_max_iter and all(q <= cap for q in ratios)
    return CheckResult(10, "ergodic fixed point", ok,
                       {"alpha_inf": sol.alpha_inf, "alpha_convention": sol.alpha_convention,
                        "residual": sol.residual, "iterations": sol.iterations,
                        "max_ratio": max(ratios) if ratios else 0.0, "ratio_cap": cap})


def check_invariant(ctx):
    v = ctx.sc.verify
    n = v.invariant_samples
    chains = min(n, 10000)
    per = int(np.ceil(n / chains))
    burn, thin = 5.0, 1.0
    cfg = ctx.cfg(dt=v.invariant_dt, n_paths=chains, horizon=burn + thin * per)
    beta = ergodic_drift(ctx.model, ctx.ergodic)
    s = invariant_sampler(beta, ctx.sc.model.sigma, burn, thin, cfg, per_chain=per)[:n]
    mu = ctx.mu_inf
    w1 = w1_to_quantiles(s, mu.x, mu.density)
    return CheckResult(11, "invariant measure against the stationary density", w1 <= 0.03,
                       {"samples": int(s.size), "w1": w1, "dt": cfg.dt})


def _w1_with_se(samples, mu):
    xs = np.sort(samples)
    n = xs.size
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (mu.density[1:] + mu.density[:-1]) * np.diff(mu.x))))
    cdf /= cdf[-1]
    q = np.interp((np.arange(n) + 0.5) / n, cdf, mu.x)
    d = np.abs(xs - q)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def turnpike_curve(ctx):
    """W1(Law(X_s), mu_inf) for the optimal process of the g' problem, with its envelope."""
    v = ctx.sc.verify
    T = v.turnpike_horizon
    x0 = v.turnpike_start
    vf2 = ctx.vf(2, T)
    n_steps = int(round(T / v.turnpike_dt))
    cfg = ctx.cfg(dt=v.turnpike_dt, n_paths=v.turnpike_paths, horizon=T, out_every=max(1, n_steps // 80))
    ens = simulate_paths(optimal_feedback_drift(ctx.model2, vf2), ctx.sc.model.sigma, x0, cfg, record=True)
    mu = ctx.mu_inf
    w1, se = np.array([_w1_with_se(p[:, 0], mu) for p in ens.paths]).T
    tp = ctx.ledger.turnpike
    lam = tp["lam_inf"]
    w_start = float(trapezoid(np.abs(mu.x - x0) * mu.density, mu.x))
    sol = ctx.ergodic
    lip_gap = float(np.max(np.abs(np.diff(ctx.sc.model.g2_slope * ctx.grid.x - sol.phi_inf))) / ctx.grid.dx)
    s = ens.times
    with np.errstate(over="ignore", invalid="ignore"):
        inner = w_start * np.exp(-lam * s) + lip_gap * np.exp(-lam * (T - s))
        env = np.where(np.isinf(tp["A_tilde"]), np.inf, tp["A_tilde"] * inner)
    return {"s": s, "w1": w1, "se": se, "envelope": env, "tau": tp["tau"], "T": T,
            "w1_start": w_start, "lip_gap": lip_gap, "flagged": ens.flagged}


def check_turnpike(ctx):
    cur = turnpike_curve(ctx)
    s, w1, se, env = cur["s"], cur["w1"], cur["se"], cur["envelope"]
    sel = s <= cur["T"] - cur["tau"] + 1e-12
    excess = np.where(sel, w1 - env - 3 * se, -np.inf)
    j = int(np.argmin(w1))
    u_shape = 0 < j < w1.size - 1 and w1[0] - w1[j] > 3 * (se[0] + se[j]) and w1[-1] - w1[j] > 3 * (se[-1] + se[j])
    ok = bool(np.all(excess <= 0) and u_shape)
    fit = fit_exponential_rate(s[: j + 1], w1[: j + 1]) if j >= 1 and np.all(w1[: j + 1] > 0) else None
    return CheckResult(12, "turnpike envelope and U-shape", ok,
                       {"w1_first": float(w1[0]), "w1_min": float(w1[j]), "s_min": float(s[j]),
                        "w1_last": float(w1[-1]), "u_shape": bool(u_shape),
                        "max_excess": float(np.max(excess[sel])), "A_tilde": ctx.ledger.turnpike["A_tilde"],
                        "lambda_inf": ctx.ledger.turnpike["lam_inf"],
                        "entry_rate": fit.rate if fit else None})


def check_two_drift(ctx):
    v = ctx.sc.verify
    sc = ctx.sc
    T = v.two_drift_horizon
    vf1, vf2 = ctx.vf(1, T), ctx.vf(2, T)
    cfg = ctx.cfg(dt=v.coupling_dt, n_paths=v.two_drift_paths, horizon=T,
                  out_every=max(1, int(round(0.05 / v.coupling_dt))))
    delta = sc.model.sigma * np.sqrt(cfg.dt)
    run = two_drift_coupling(optimal_feedback_drift(ctx.model, vf1), optimal_feedback_drift(ctx.model2, vf2),
                             sc.model.sigma, sc.sim.x0, sc.sim.x0, delta, cfg)
    tp = ctx.ledger.turnpike
    gap = abs(sc.model.g2_slope - sc.model.g_slope)
    with np.errstate(over="ignore", invalid="ignore"):
        env = np.where(np.isinf(tp["C_bwd"]), np.inf, tp["C_bwd"] * gap * np.exp(-tp["lam_bwd"] * (T - run.times)))
    excess = run.mean_dist - env - 3 * run.dist_se
    return CheckResult(13, "two-drift coupling against the dominating bound", bool(np.all(excess <= 0)),
                       {"max_mean_dist": float(run.mean_dist.max()), "C_bwd": tp["C_bwd"],
                        "log_C_bwd": tp["log_C_bwd"], "lambda_bwd": tp["lam_bwd"],
                        "delta_switch": float(delta), "max_excess": float(excess.max())})


CHECKS = {
    1: check_rate_closed_form,
    2: check_monotone,
    4: check_hjb_oracle,
    5: check_gradient_bound,
    6: check_hessian_bound,
    7: check_value_contraction,
    8: check_coupling_contraction,
    9: check_controlled_coupling,
    10: check_ergodic,
    11: check_invariant,
    12: check_turnpike,
    13: check_two_drift,
    3: check_inequality,  # last: it inspects every bundle the others built
}
ALL_IDS = tuple(range(1, 15))


def check_determinism(sc: Scenario, workers=4):
    """Smoke-sized reports: twice with one worker, once with ``workers``; compare bytes."""
    data = sc.to_dict()
    # sizes come from the smoke preset; model, seed and start points are kept
    data.pop("verify")
    data["grid"].pop("dx")
    data["sim"].pop("block_size")
    small = scenario_from_dict(data, smoke=True)
    ids = [i for i in ALL_IDS if i != 14]
    texts = [dumps_report(run_checks(small, ids, n_workers=w)) for w in (1, 1, workers)]
    same_seed = texts[0] == texts[1]
    same_workers = texts[0] == texts[2]
    return CheckResult(14, "deterministic reports", same_seed and same_workers,
                       {"repeat_identical": same_seed, "workers_identical": same_workers, "workers": workers,
                        "report_bytes": len(texts[0])})


def select_ids(checks):
    if not checks or "all" in checks:
        return list(ALL_IDS)
    ids = sorted({int(c) for c in checks})
    bad = [i for i in ids if i not in ALL_IDS]
    if bad:
        raise ValueError(f"unknown check ids {bad}")
    return ids


def run_checks(sc: Scenario, ids=None, n_workers=None, ctx=None):
    ids = select_ids(sc.checks) if ids is None else list(ids)
    ctx = ctx or Context(sc, n_workers)
    results = {}
    for cid, fn in CHECKS.items():
        if cid in ids:
            log.info("check %d", cid)
            results[cid] = fn(ctx)
    if 14 in ids:
        results[14] = check_determinism(sc, workers=max(ctx.workers, 4))
    ordered = [asdict(results[i]) for i in sorted(results)]
    report = {
        "version": __version__,
        "scenario": sc.to_dict(),
        "constants": ctx.ledger.to_dict(),
        "checks": ordered,
        "passed": all(r["passed"] for r in ordered),
    }
    return report


# ---------------------------------------------------------------- serialisation

def clean(obj, digits=12):
    """JSON-ready copy: fixed-precision floats, non-finite values as strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist(), digits)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            return "nan" if np.isnan(v) else ("inf" if v > 0 else "-inf")
        return float(f"{v:.{digits}g}")
    return obj


def dumps_report(report):
    return json.dumps(clean(report), indent=2) + "\n"
