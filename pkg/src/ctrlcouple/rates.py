"""Eberle's concave distance f, the rate lambda, the constant C and derived bounds.

For a profile kappa with negative part kappa^-:

    phi(r)  = exp(-1/4 int_0^r s kappa^-(s) ds),   Phi = int phi
    g(r)    = 1 - int_0^{r ^ R1} Phi/phi / (2 int_0^{R1} Phi/phi)
    f(r)    = int_0^r phi g
    1/lam   = sigma^-2 int_0^{R1} Phi/phi
    C       = min(phi(R0)/2, 1/(2 int_0^{R1} 1/phi), lam Phi(R1))

Everything downstream (gradient, Hessian, stability and turnpike bounds) is a
plain formula in these numbers, collected in a ConstantLedger.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from ._numerics import cumulative_simpson, golden_section
from .dissipativity import R_MIN, KappaProfile, check_in_K, perturb_with_inverse_r

LOG_MAX = 700.0


class RateError(RuntimeError):
    """A rate bundle cannot be built for the given profile."""


@dataclass(frozen=True, eq=False)
class RateBundle:
    """Tabulated f, phi, Phi, g together with (R0, R1, lam, C).

    Beyond ``r_max`` f is extended linearly with slope f'(r_max).
    """

    r: np.ndarray
    kappa: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    g: np.ndarray
    f: np.ndarray
    fp: np.ndarray
    fpp: np.ndarray
    R0: float
    R1: float
    lam: float
    C: float
    sigma: float
    profile: KappaProfile = field(repr=False)
    certified: bool = True
    C_terms: tuple = ()

    @property
    def r_max(self):
        return float(self.r[-1])

    def f_eval(self, r):
        r = np.asarray(r, dtype=float)
        spline = self.__dict__.get("_spline")
        if spline is None:
            spline = CubicHermiteSpline(self.r, self.f, self.fp)
            object.__setattr__(self, "_spline", spline)
        inside = np.clip(r, 0.0, self.r_max)
        out = spline(inside)
        beyond = r > self.r_max
        return np.where(beyond, self.f[-1] + self.fp[-1] * (r - self.r_max), out)

    def fprime(self, r):
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.r, self.fp, right=self.fp[-1])

    @property
    def twisted_lip_factor(self):
        """sup_r r / f(r): the f-twisted Lipschitz norm of a 1-Lipschitz linear map."""
        pos = self.r > 0
        return float(max(np.max(self.r[pos] / self.f[pos]), 1.0 / self.fp[-1]))

    def inequality_residual(self):
        """max over interior nodes of f'' - (r/4) kappa f' + lam/(2 sigma^2) f."""
        lhs = self.fpp - 0.25 * self.r * self.kappa * self.fp
        rhs = -self.lam / (2.0 * self.sigma ** 2) * self.f
        return float(np.max((lhs - rhs)[1:]))

    def check_invariants(self, tol=1e-8):
        r, f, fp = self.r, self.f, self.fp
        scale = 1.0 + np.abs(r)
        checks = {
            "differential_inequality": self.inequality_residual() <= tol,
            "f_lower": bool(np.all(self.C * r - f <= tol * scale)),
            "f_upper": bool(np.all(f - r <= tol * scale)),
            "fp_lower": bool(np.all(self.C - fp <= tol)),
            "fp_upper": bool(np.all(fp - 1.0 <= tol)),
            "fp_positive": bool(np.all(fp > 0)),
            "concave": bool(np.all(self.fpp <= tol)),
            "fp_at_zero": abs(fp[0] - 1.0) <= tol,
        }
        return checks

    def summary(self):
        return {
            "R0": self.R0,
            "R1": self.R1,
            "lambda": self.lam,
            "C": self.C,
            "C_terms": list(self.C_terms),
            "sigma": self.sigma,
            "f_at_1": float(self.f_eval(1.0)),
            "twisted_lip_factor": self.twisted_lip_factor,
            "inequality_residual": self.inequality_residual(),
            "certified": self.certified,
            "profile": self.profile.label or self.profile.provenance,
            "r_max": self.r_max,
            "n_nodes": int(self.r.size),
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "kappa", "phi", "Phi", "g", "f", "fprime"])
            for row in zip(self.r, self.kappa, self.phi, self.Phi, self.g, self.f, self.fp):
                w.writerow([f"{v:.12g}" for v in row])


# ---------------------------------------------------------------- construction

def _find_R0(profile, r_scan):
    k = profile(r_scan)
    neg = np.flatnonzero(k < 0)
    if neg.size == 0:
        return 0.0
    i = neg[-1]
    if i == r_scan.size - 1:
        raise RateError("kappa is negative at the end of the scan; enlarge r_max or check the profile")
    lo, hi = r_scan[i], r_scan[i + 1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if profile(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * hi:
            break
    return float(hi)


def _find_R1(profile, R0, r_scan, r_limit):
    k_scan = profile(r_scan)
    suffix = np.minimum.accumulate(k_scan[::-1])[::-1]
    tail = float(np.min(profile(np.geomspace(r_scan[-1], 100.0 * r_scan[-1], 200))))

    def m(R):
        j = np.searchsorted(r_scan, R, side="right")
        rest = suffix[j] if j < r_scan.size else np.inf
        return min(float(profile(R)), rest, tail)

    def ok(R):
        return R >= R0 and m(R) * R * (R - R0) >= 8.0

    lo = R0
    hi = max(2.0 * R0, R0 + 1.0)
    while not ok(hi):
        lo, hi = hi, 2.0 * hi
        if hi > r_limit:
            raise RateError(f"R1 exceeds {r_limit:g}; increase r_max")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return float(hi)


def _segment_nodes(a, b, m):
    """m intervals on [a, b] clustered quadratically at both ends."""
    k = np.arange(m + 1)
    return a + (b - a) * 0.5 * (1.0 - np.cos(np.pi * k / m))


def _build_grid(R0, R1, r_max, breakpoints, n_nodes):
    cuts = {0.0, R1, r_max}
    if R0 > 0:
        cuts.add(R0)
    cuts |= {float(b) for b in breakpoints if 0 < b < r_max}
    cuts = sorted(cuts)
    inner_len = R1
    outer_len = r_max - R1
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-12 * max(1.0, b):
            continue
        share = 0.8 * (b - a) / inner_len if b <= R1 + 1e-12 else 0.2 * (b - a) / max(outer_len, 1e-12)
        m = max(16, int(round(share * n_nodes)))
        m += m % 2
        pieces.append(_segment_nodes(a, b, m))
    nodes = np.concatenate([pieces[0]] + [p[1:] for p in pieces[1:]])
    return nodes, pieces


def _one_sided_q(profile, seg):
    """r kappa^-(r) / 4 on one segment, endpoints read from inside the segment."""
    pts = np.maximum(seg, R_MIN).copy()
    width = seg[-1] - seg[0]
    pts[0] = max(seg[0] + 1e-13 * width, R_MIN)
    pts[-1] = seg[-1] - 1e-13 * width
    return 0.25 * pts * np.maximum(-profile(pts), 0.0)


def _seg_cumulative(pieces, values):
    """Cumulative Simpson run separately on each segment so no stencil spans a kink.

    ``values`` is either one array on the global nodes or a list of per-segment arrays.
    """
    out, start, offset = [], 0, 0.0
    for k, seg in enumerate(pieces):
        n = seg.size
        vals = values[k] if isinstance(values, list) else values[start:start + n]
        c = cumulative_simpson(seg, vals) + offset
        out.append(c if k == 0 else c[1:])
        offset = c[-1]
        start += n - 1
    return np.concatenate(out)


def compute_rate_bundle(profile: KappaProfile, sigma, r_max=None, n_nodes=4000, check=True) -> RateBundle:
    """Build (f, lam, C) for a profile in the admissible class."""
    sigma = float(sigma)
    if check:
        rep = check_in_K(profile)
        if not rep.in_K:
            raise RateError(f"profile not in K (tail infimum {rep.tail_infimum:.4g} on {rep.tail_window})")
    hi_scan = r_max if r_max is not None else max(1e3, 10.0 * profile.tail_window[1])
    r_scan = np.unique(np.concatenate([
        np.geomspace(R_MIN, hi_scan, 20000),
        [b for b in profile.breakpoints if 0 < b < hi_scan],
    ]))
    R0 = _find_R0(profile, r_scan)
    R1 = _find_R1(profile, R0, r_scan, hi_scan)
    if r_max is None:
        r_max = 2.0 * R1 + 5.0
    elif R1 >= r_max:
        raise RateError(f"R1 = {R1:.6g} exceeds r_max = {r_max:g}; increase r_max")

    r, pieces = _build_grid(R0, R1, r_max, profile.breakpoints, n_nodes)
    # kappa at 0 is read at the cap, where r kappa^- is already at its limit
    kappa = profile(np.maximum(r, R_MIN))
    q = 0.25 * np.maximum(r, R_MIN) * np.maximum(-kappa, 0.0)
    I = _seg_cumulative(pieces, [_one_sided_q(profile, seg) for seg in pieces])
    if I.max() > LOG_MAX:
        raise RateError(f"int r kappa^-/4 reaches {I.max():.1f}; rate underflows double precision")
    phi = np.exp(-I)
    Phi = _seg_cumulative(pieces, phi)
    ratio = Phi * np.exp(I)
    J = _seg_cumulative(pieces, ratio)
    K = _seg_cumulative(pieces, np.exp(I))
    i0 = int(np.argmin(np.abs(r - R0)))
    i1 = int(np.argmin(np.abs(r - R1)))
    J1, K1 = J[i1], K[i1]
    lam = sigma ** 2 / J1
    g = 1.0 - np.minimum(J, J1) / (2.0 * J1)
    g[i1:] = 0.5
    fp = phi * g
    f = _seg_cumulative(pieces, fp)
    below = np.arange(r.size) < i1
    fpp = -q * fp - np.where(below, Phi / (2.0 * J1), 0.0)
    C_terms = (float(phi[i0] / 2.0), float(1.0 / (2.0 * K1)), float(lam * Phi[i1]))
    C = min(C_terms)
    return RateBundle(
        r=r, kappa=kappa, phi=phi, Phi=Phi, g=g, f=f, fp=fp, fpp=fpp,
        R0=float(R0), R1=float(R1), lam=float(lam), C=float(C), sigma=sigma,
        profile=profile, certified=profile.certified, C_terms=C_terms,
    )


# ---------------------------------------------------------------- theorem constants

def gradient_bounds(M_F_x, M_g_x, bundle: RateBundle, tau):
    """(M_{x,tau}, M_x): Lipschitz bounds on the value function tau before the end."""
    lam, C = bundle.lam, bundle.C
    decay = np.exp(-lam * np.asarray(tau, dtype=float))
    finite = (M_F_x * (1.0 - decay) / lam + M_g_x * decay) / C
    return finite, (M_F_x / lam + M_g_x) / C


@dataclass(frozen=True)
class CoefficientBounds:
    """Algebraic bounds that follow once |grad phi| <= M is known."""

    M: float
    omega_M: float
    control_bound: float
    drift_perturbation: float
    ham_hessian: float
    M_H_x: float
    M_H_xp: float
    M_H_xx: float
    Dx_w: float
    Dp_w: float


def coefficient_bounds(constants, M, omega) -> CoefficientBounds:
    """Bounds on w, b(., w) - b(., 0), D_pp H and the x-derivatives of H along grad phi."""
    c = constants
    om = float(omega(M))
    return CoefficientBounds(
        M=float(M),
        omega_M=om,
        control_bound=c.M_u * (1.0 + M) / om,
        drift_perturbation=c.M_u ** 2 * (1.0 + M) / om,
        ham_hessian=c.M_u ** 2 / om,
        M_H_x=c.M_x * M + c.M_F_x,
        M_H_xp=c.M_xu * c.M_u * (1.0 + M) / om + c.M_x,
        M_H_xx=c.M_xx * (1.0 + M) + c.M_xu ** 2 * (1.0 + M) ** 2 / om,
        Dx_w=c.M_xu * (1.0 + M) / om,
        Dp_w=c.M_u / om,
    )


def tail_integral(lam, theta):
    """int_theta^inf lam / (e^{lam s} - 1) ds = -log(1 - e^{-lam theta})."""
    return -np.log(-np.expm1(-lam * np.asarray(theta, dtype=float)))


def hessian_objective(coeffs: CoefficientBounds, M_g_x, bundle: RateBundle, tau, theta):
    lam, C = bundle.lam, bundle.C
    A = (2.0 * M_g_x * lam / np.expm1(lam * tau)
         + 2.0 * coeffs.M_H_x * tail_integral(lam, theta)
         + coeffs.M_H_xx / lam) / C
    return A * np.exp(coeffs.M_H_xp * np.asarray(theta, dtype=float))


def hessian_bound(coeffs: CoefficientBounds, M_g_x, bundle_perturbed: RateBundle, tau):
    """inf over theta in (0, tau) of A_{theta,tau} e^{M_H_xp theta}; returns (value, theta*).

    When M_H_xx / lam dominates, the objective keeps falling as theta -> 0 and
    theta* lands on the floor of the search window, tau e^-60; the value is
    then the limit to within double precision.
    """
    if not tau > 0:
        raise ValueError("remaining horizon must be positive")
    obj = lambda lt: np.log(hessian_objective(coeffs, M_g_x, bundle_perturbed, tau, np.exp(lt)))
    grid = np.linspace(np.log(tau) - 60.0, np.log(tau), 601)
    vals = obj(grid)
    j = int(np.argmin(vals))
    lo, hi = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]
    lt = float(golden_section(obj, np.array([lo]), np.array([hi]), tol=1e-12)[0])
    if obj(lt) > vals[j]:
        lt = grid[j]
    theta = float(np.exp(lt))
    return float(np.exp(obj(lt))), theta


def perturbation_stab(constants, sigma, M_g, M_g2, omega):
    """Coefficient c of the c/r perturbation for the stability estimate between g and g'."""
    M_max = max(M_g, M_g2)
    return constants.M_u ** 2 / sigma ** 2 * (
        4.0 * (1.0 + M_g) / omega(M_g) + (M_g + M_g2) / omega(M_max))


def perturbation_forward(constants, sigma, M_g, omega):
    """Coefficient of the c/r perturbation for the contraction of g-optimal processes."""
    return 4.0 * constants.M_u ** 2 * (1.0 + M_g) / (sigma ** 2 * omega(M_g))


def perturbation_turnpike(constants, sigma, M0, omega):
    return constants.M_u ** 2 / sigma ** 2 * (
        4.0 * (1.0 + M0) / omega(M0) + 3.0 * M0 / omega(2.0 * M0))


@dataclass
class TurnpikeConstants:
    M_phi0: float
    M_phi_g: float
    M_phi_g2: float
    lam_inf: float
    C_kappa_inf: float
    tau: float
    tau_clamped: bool
    C_turn: float
    C_tilde: float
    lam_tilde: float
    A_tilde: float
    C_fwd: float
    lam_fwd: float
    C_bwd: float
    lam_bwd: float
    c_inf: float
    c_tilde: float
    c_fwd: float
    c_stab: float
    log_C_bwd: float
    log_A_tilde: float


def _log_quotient(num, *den):
    if num == 0:
        return -np.inf
    return float(np.log(num) - sum(np.log(d) for d in den))


def _exp_or_inf(v):
    return float(np.exp(v)) if v < 709.0 else float("inf")


def turnpike_constants(constants, sigma, base: RateBundle, omega, M_g_x=None, M_g2_x=None,
                       n_nodes=4000) -> TurnpikeConstants:
    """Constants of the turnpike envelope and of the forward/backward couplings.

    ``M_g_x`` is the Lipschitz constant of the terminal cost g, ``M_g2_x`` the
    one of the perturbed terminal cost g'; both default to the model's.
    """
    M_g = constants.M_g_x if M_g_x is None else float(M_g_x)
    M_g2 = M_g if M_g2_x is None else float(M_g2_x)
    profile = base.profile
    build = lambda c: compute_rate_bundle(perturb_with_inverse_r(profile, c), sigma, n_nodes=n_nodes)

    _, M0 = gradient_bounds(constants.M_F_x, 0.0, base, 0.0)
    _, M_phi_g = gradient_bounds(constants.M_F_x, M_g, base, 0.0)
    _, M_phi_g2 = gradient_bounds(constants.M_F_x, M_g2, base, 0.0)

    c_inf = perturbation_turnpike(constants, sigma, M0, omega)
    b_inf = build(c_inf)
    raw_tau = np.log(M_g2 / M0) / base.lam if M_g2 > 0 and M0 > 0 else -np.inf
    tau = max(0.0, float(raw_tau))
    log_C_turn = max(_log_quotient(constants.M_u ** 2, b_inf.lam, b_inf.C, omega(2.0 * M0)), -np.log(b_inf.C))

    c_tilde = constants.M_u ** 2 / sigma ** 2 * (
        4.0 * (1.0 + M0) / omega(M0) + (M0 + M_phi_g2) / omega(M_phi_g2))
    b_tilde = build(c_tilde)
    C_tilde, lam_tilde = 1.0 / b_tilde.C, b_tilde.lam
    log_A = log_C_turn + max(0.0, -np.log(b_tilde.C) + (b_inf.lam - lam_tilde) * tau)
    C_turn = _exp_or_inf(log_C_turn)
    A = _exp_or_inf(log_A)

    c_fwd = perturbation_forward(constants, sigma, M_phi_g, omega)
    b_fwd = build(c_fwd)
    c_stab = perturbation_stab(constants, sigma, M_phi_g, M_phi_g2, omega)
    b_stab = build(c_stab)
    # lam and C can both sit near 1e-170 here, so form the quotient in logs
    log_C_bwd = _log_quotient(constants.M_u ** 2, b_stab.lam, b_stab.C, omega(max(M_phi_g, M_phi_g2)))
    C_bwd = float(np.exp(log_C_bwd)) if log_C_bwd < 709.0 else float("inf")
    return TurnpikeConstants(
        M_phi0=float(M0), M_phi_g=float(M_phi_g), M_phi_g2=float(M_phi_g2),
        lam_inf=b_inf.lam, C_kappa_inf=b_inf.C, tau=tau, tau_clamped=bool(raw_tau < 0),
        C_turn=float(C_turn), C_tilde=float(C_tilde), lam_tilde=float(lam_tilde), A_tilde=float(A),
        C_fwd=1.0 / b_fwd.C, lam_fwd=b_fwd.lam, C_bwd=float(C_bwd), lam_bwd=b_stab.lam,
        log_C_bwd=float(log_C_bwd), log_A_tilde=float(log_A),
        c_inf=float(c_inf), c_tilde=float(c_tilde), c_fwd=float(c_fwd), c_stab=float(c_stab),
    )


@dataclass
class ConstantLedger:
    """Every constant entering an envelope, with the bundles it came from."""

    base: dict
    M_phi_x: float
    coefficients: dict
    stability_lambda: float
    stability_C: float
    forward_bundle: dict
    turnpike: Optional[dict] = None
    hessian_samples: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def build_ledger(model, base: RateBundle, M_g2_x=None, taus=(0.1, 0.5, 1.0), n_nodes=4000,
                 with_turnpike=True) -> ConstantLedger:
    """Assemble the ledger for ``model`` given the bundle of its drift profile."""
    c = model.constants
    sigma = model.sigma
    om = model.omega
    _, M = gradient_bounds(c.M_F_x, c.M_g_x, base, 0.0)
    coeffs = coefficient_bounds(c, M, om)
    M2 = c.M_g_x if M_g2_x is None else float(M_g2_x)
    _, M_2 = gradient_bounds(c.M_F_x, M2, base, 0.0)
    stab = compute_rate_bundle(
        perturb_with_inverse_r(base.profile, perturbation_stab(c, sigma, M, M_2, om)), sigma, n_nodes=n_nodes)
    fwd = compute_rate_bundle(
        perturb_with_inverse_r(base.profile, perturbation_forward(c, sigma, M, om)), sigma, n_nodes=n_nodes)
    hess = {}
    for tau in taus:
        val, theta = hessian_bound(coeffs, c.M_g_x, fwd, tau)
        hess[f"{tau:g}"] = {"bound": val, "theta": theta}
    tp = None
    if with_turnpike:
        tp = asdict(turnpike_constants(c, sigma, base, om, c.M_g_x, M2, n_nodes=n_nodes))
    return ConstantLedger(
        base=base.summary(),
        M_phi_x=float(M),
        coefficients=asdict(coeffs),
        stability_lambda=stab.lam,
        stability_C=stab.C,
        forward_bundle=fwd.summary(),
        turnpike=tp,
        hessian_samples=hess,
    )
