"""Dissipativity profiles kappa(r) and membership in the admissible class.

kappa(r) is the worst normalised inward alignment
-2<b(x)-b(x'), x-x'> / (sigma^2 |x-x'|^2) over pairs at distance r.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy import integrate

R_MIN = 1e-8
PROVENANCES = ("analytic", "estimated", "perturbed")


class QuadratureError(RuntimeError):
    """The negative-part integral near 0 does not converge."""


@dataclass(frozen=True)
class KappaProfile:
    """An immutable profile r -> kappa(r) on r > 0.

    ``breakpoints`` lists radii where kappa may have kinks or jumps; the rate
    quadrature puts nodes there. ``certified`` is False when the profile (or
    its base) came from sampling, which only upper-bounds the true infimum.
    """

    fn: Callable
    provenance: str = "analytic"
    tail_window: tuple = (50.0, 100.0)
    breakpoints: tuple = ()
    base: Optional["KappaProfile"] = None
    shift: float = 0.0
    certified: bool = True
    label: str = ""

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        return np.asarray(self.fn(r), dtype=float) * np.ones_like(r)

    def negpart(self, r):
        return np.maximum(-self(r), 0.0)

    @cached_property
    def tail_infimum(self):
        lo, hi = self.tail_window
        return float(np.min(self(np.geomspace(lo, hi, 400))))

    @cached_property
    def negpart_integral(self):
        return negpart_integral(self)

    @classmethod
    def constant(cls, value, **kw):
        value = float(value)
        kw.setdefault("label", f"const({value:g})")
        return cls(lambda r: np.full(np.shape(r), value), **kw)

    @classmethod
    def tabulated(cls, r, kappa, provenance="estimated", **kw):
        """Piecewise-linear interpolation, held constant outside the table."""
        r = np.asarray(r, dtype=float)
        k = np.asarray(kappa, dtype=float)
        if r.ndim != 1 or r.shape != k.shape or np.any(np.diff(r) <= 0):
            raise ValueError("tabulated profile needs strictly increasing r and matching kappa")
        kw.setdefault("tail_window", (r[-1] / 2.0, r[-1]))
        kw.setdefault("certified", provenance != "estimated")
        prof = cls(lambda x: np.interp(x, r, k), provenance=provenance, **kw)
        object.__setattr__(prof, "_table", (r, k))
        return prof

    def table(self, r=None):
        if r is None:
            r = getattr(self, "_table", (np.geomspace(1e-3, self.tail_window[1], 200),))[0]
        return np.asarray(r, dtype=float), self(r)

    def to_csv(self, path, r=None):
        rr, kk = self.table(r)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "kappa"])
            for a, b in zip(rr, kk):
                w.writerow([f"{a:.12g}", f"{b:.12g}"])

    @classmethod
    def from_csv(cls, path, provenance="estimated"):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        r = np.array([float(row["r"]) for row in rows])
        k = np.array([float(row["kappa"]) for row in rows])
        return cls.tabulated(r, k, provenance=provenance)


def two_regime_profile(kappa_far, L, R, sigma, **kw):
    """Profile equal to -2L/sigma^2 below R and 2 kappa_far/sigma^2 from R on."""
    s = 2.0 / sigma ** 2
    fn = lambda r: np.where(np.asarray(r) < R, -s * L, s * kappa_far)
    kw.setdefault("breakpoints", (R,))
    kw.setdefault("tail_window", (4 * R, 8 * R))
    return KappaProfile(fn, **kw)


# ---------------------------------------------------------------- estimation

@dataclass(frozen=True)
class KappaProbe:
    """Sampling plan for profile estimation.

    :param x_box: half-width of the box for base points
    :param n_points: number of base points x
    :param n_directions: unit directions per base point (ignored in 1D)
    :param u_box: half-width of the control box; None for uncontrolled drifts
    :param n_controls: sampled controls
    :param seed: RNG seed
    """

    x_box: float = 5.0
    n_points: int = 2001
    n_directions: int = 16
    u_box: Optional[float] = None
    n_controls: int = 9
    seed: int = 0
    state_dim: int = 1
    control_dim: int = 1


def estimate_kappa(drift, sigma, r_grid, probe: KappaProbe) -> KappaProfile:
    """Sampled minimum of the normalised alignment at each radius.

    ``drift`` is a batch map x -> b(x) or, when ``probe.u_box`` is set,
    (x, u) -> b(x, u). Because only finitely many pairs are seen, the result
    upper-bounds the true profile and is stamped heuristic.
    """
    r_grid = np.asarray(r_grid, dtype=float)
    if r_grid.ndim != 1 or r_grid.size == 0 or np.any(r_grid <= 0) or np.any(np.diff(r_grid) <= 0):
        raise ValueError("r_grid must be a nonempty strictly increasing array of positive radii")
    if probe.n_points < 1 or (probe.u_box is not None and probe.n_controls < 1):
        raise ValueError("empty probe")
    d = probe.state_dim
    rng = np.random.default_rng(probe.seed)
    if d == 1:
        xs = np.linspace(-probe.x_box, probe.x_box, probe.n_points)[:, None]
        dirs = np.ones((1, 1))
    else:
        xs = rng.uniform(-probe.x_box, probe.x_box, size=(probe.n_points, d))
        dirs = rng.normal(size=(probe.n_directions, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if probe.u_box is None:
        controls = [None]
    else:
        us = np.linspace(-probe.u_box, probe.u_box, probe.n_controls)
        controls = [np.full((1, probe.control_dim), u) for u in us]

    base = np.repeat(xs, len(dirs), axis=0)
    vec = np.tile(dirs, (len(xs), 1))
    out = np.empty_like(r_grid)
    for i, r in enumerate(r_grid):
        # centre each pair on the base point
        a = base - 0.5 * r * vec
        b = base + 0.5 * r * vec
        worst = np.inf
        for u in controls:
            if u is None:
                db = drift(a) - drift(b)
            else:
                uu = np.broadcast_to(u, (len(a), probe.control_dim))
                db = drift(a, uu) - drift(b, uu)
            val = -2.0 * np.sum(db * (a - b), axis=1) / (sigma ** 2 * r * r)
            worst = min(worst, float(val.min()))
        out[i] = worst
    prof = KappaProfile.tabulated(r_grid, out, provenance="estimated", label="estimated")
    return prof


# ---------------------------------------------------------------- class membership

def negpart_integral(profile, r_min=R_MIN):
    """Integral of r kappa^-(r) over (0, 1] with r = e^t.

    Raises QuadratureError when the integrand in t does not vanish at the
    cap, which is how a non-integrable negative part shows up.
    """
    def integrand(t):
        r = np.exp(t)
        return r * r * float(profile.negpart(r))

    t0 = np.log(r_min)
    edge = integrand(t0)
    if not np.isfinite(edge) or edge > 1e-6:
        raise QuadratureError(f"r^2 kappa^-(r) = {edge:.3e} at r = {r_min:g}; negative part not integrable")
    inner = [np.log(b) for b in profile.breakpoints if r_min < b < 1.0]
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(integrand, t0, 0.0, points=inner or None, limit=400,
                                      epsabs=1e-13, epsrel=1e-11)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(str(exc)) from exc
    # the piece below the cap, exact when r kappa^-(r) is constant there
    return float(val + edge)


@dataclass
class MembershipReport:
    in_K: bool
    tail_infimum: float
    tail_window: tuple
    negpart_integral: float


def check_in_K(profile: KappaProfile, tail_R: Optional[float] = None, tail_lo: Optional[float] = None):
    """Positive tail infimum on a finite window and integrable negative part near 0.

    The window defaults to the profile's declared tail window; with ``tail_R``
    it is [tail_R/2, tail_R] unless ``tail_lo`` is given.
    """
    if tail_R is None:
        lo, hi = profile.tail_window
    else:
        hi = float(tail_R)
        lo = float(tail_lo) if tail_lo is not None else hi / 2.0
    vals = profile(np.geomspace(lo, hi, 400))
    if not np.all(np.isfinite(vals)):
        raise ValueError("profile is not finite on the tail window")
    tail = float(vals.min())
    neg = negpart_integral(profile)
    return MembershipReport(bool(tail > 0 and np.isfinite(neg)), tail, (lo, hi), neg)


def perturb_with_inverse_r(profile: KappaProfile, c) -> KappaProfile:
    """r -> profile(r) - c / r. Perturbations stack additively on the same base."""
    c = float(c)
    if c < 0 or not np.isfinite(c):
        raise ValueError(f"perturbation must be a finite nonnegative number, got {c}")
    root = profile.base if profile.provenance == "perturbed" and profile.base is not None else profile
    total = (profile.shift if root is not profile else 0.0) + c
    if total == 0.0:
        return root
    fn = root.fn

    def kappa(r):
        r = np.asarray(r, dtype=float)
        return fn(r) - total / r

    # push the tail window out far enough for the c/r term to fade
    lo, hi = root.tail_window
    base_tail = root.tail_infimum
    if base_tail > 0:
        lo = max(lo, 4.0 * total / base_tail)
        hi = max(hi, 2.0 * lo)
    return KappaProfile(
        kappa,
        provenance="perturbed",
        tail_window=(lo, hi),
        breakpoints=root.breakpoints,
        base=root,
        shift=total,
        certified=root.certified,
        label=f"{root.label or 'kappa'} - {total:.6g}/r",
    )
