"""Controlled diffusions dX = b(X,u)ds + sigma dB with cost F(X,u) and terminal cost g.

All evaluators work on batches: states have shape ``(n, d)``, controls
``(n, p)``; drifts return ``(n, d)`` and costs ``(n,)``. Public helpers accept
a single point as well and return a matching single result.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._numerics import FD_STEP, FD_STEP2, fd_step, golden_section

TOL_GRAD = 1e-10
MAX_ITER = 100


class MinimizationError(RuntimeError):
    """Inner minimisation over the control did not converge."""

    def __init__(self, message, last_iterate, grad_norm):
        super().__init__(f"{message} (grad norm {np.max(grad_norm):.3e})")
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class DeclaredConstants:
    """Bounds the user asserts for the model; checked by sampling, never inferred.

    :param M_u: bound on |D_u b| and |D_u F(x, 0)|
    :param M_F_x: Lipschitz constant of F in x, uniform in u
    :param M_g_x: Lipschitz constant of the terminal cost
    :param M_x: bound on |D_x b|
    :param M_xx: bound on second x-derivatives of b and F
    :param M_xu: bound on mixed derivatives of b and F
    """

    M_u: float = 1.0
    M_F_x: float = 0.0
    M_g_x: float = 0.0
    M_x: float = 0.0
    M_xx: float = 0.0
    M_xu: float = 0.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"declared constant {name} must be finite and >= 0, got {value}")

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in ("M_u", "M_F_x", "M_g_x", "M_x", "M_xx", "M_xu")}


def _constant_modulus(value):
    return lambda R: np.full(np.shape(R), float(value)) if np.ndim(R) else float(value)


@dataclass(frozen=True)
class ControlModel:
    """A control problem instance.

    Optional analytic derivatives speed up the inner minimisation; when they
    are missing, central finite differences are used. ``policy`` may give the
    minimiser w(x, p) in closed form, bypassing Newton entirely.
    """

    state_dim: int
    control_dim: int
    drift: Callable
    running_cost: Callable
    terminal_cost: Callable
    sigma: float
    convexity_modulus: Callable = field(default_factory=lambda: _constant_modulus(1.0))
    constants: DeclaredConstants = field(default_factory=DeclaredConstants)
    drift_du: Optional[Callable] = None
    drift_duu: Optional[Callable] = None
    cost_du: Optional[Callable] = None
    cost_duu: Optional[Callable] = None
    policy: Optional[Callable] = None
    affine_control: bool = False
    name: str = "model"

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        probe = np.array([0.0, 1.0, 10.0, 100.0])
        om = np.asarray(self.convexity_modulus(probe), dtype=float)
        if np.any(~np.isfinite(om)) or np.any(om <= 0):
            raise ValueError("convexity modulus must be strictly positive")
        if np.any(np.diff(om) > 1e-12 * np.abs(om[:-1])):
            raise ValueError("convexity modulus must be nonincreasing in R")

    def omega(self, R):
        return self.convexity_modulus(R)


def _as_batch(a, dim):
    a = np.asarray(a, dtype=float)
    single = a.ndim <= 1
    return a.reshape(-1, dim), single


def _objective(model, x, p, u):
    return model.running_cost(x, u) + np.sum(model.drift(x, u) * p, axis=-1)


def _grad_hess(model, x, p, u):
    """Gradient (n,p) and Hessian (n,p,p) of u -> F(x,u) + b(x,u).p."""
    n, q = u.shape
    if model.cost_du is not None and model.drift_du is not None:
        grad = model.cost_du(x, u) + np.einsum("nij,ni->nj", model.drift_du(x, u), p)
        if model.cost_duu is not None and (model.drift_duu is not None or model.affine_control):
            hess = np.array(model.cost_duu(x, u), dtype=float)
            if model.drift_duu is not None:
                hess = hess + np.einsum("nijk,ni->njk", model.drift_duu(x, u), p)
            return grad, hess
    else:
        grad = _fd_gradient(lambda v: _objective(model, x, p, v), u)
    hess = _fd_hessian(lambda v: _objective(model, x, p, v), u)
    return grad, hess


def _fd_gradient(fun, u):
    n, q = u.shape
    out = np.empty((n, q))
    for k in range(q):
        h = fd_step(u[:, k])
        up, dn = u.copy(), u.copy()
        up[:, k] += h
        dn[:, k] -= h
        out[:, k] = (fun(up) - fun(dn)) / (2.0 * h)
    return out


def _fd_hessian(fun, u):
    n, q = u.shape
    out = np.empty((n, q, q))
    f0 = fun(u)
    hs = [fd_step(u[:, k], FD_STEP2) for k in range(q)]
    for j in range(q):
        for k in range(j, q):
            if j == k:
                up, dn = u.copy(), u.copy()
                up[:, j] += hs[j]
                dn[:, j] -= hs[j]
                val = (fun(up) - 2.0 * f0 + fun(dn)) / hs[j] ** 2
            else:
                val = 0.0
                for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    v = u.copy()
                    v[:, j] += sj * hs[j]
                    v[:, k] += sk * hs[k]
                    val = val + sj * sk * fun(v)
                val = val / (4.0 * hs[j] * hs[k])
            out[:, j, k] = out[:, k, j] = val
    return out


def _newton(model, x, p, tol_grad=TOL_GRAD, max_iter=MAX_ITER):
    n = x.shape[0]
    q = model.control_dim
    u = np.zeros((n, q))
    done = np.zeros(n, dtype=bool)
    gnorm = np.full(n, np.inf)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        xa, pa, ua = x[act], p[act], u[act]
        grad, hess = _grad_hess(model, xa, pa, ua)
        gn = np.linalg.norm(grad, axis=1)
        gnorm[act] = gn
        conv = gn <= tol_grad
        try:
            step = -np.linalg.solve(hess, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        f0 = _objective(model, xa, pa, ua)
        slope = np.sum(grad * step, axis=1)
        t = np.ones(len(ua))
        ok = np.zeros(len(ua), dtype=bool)
        for _ in range(40):
            trial = ua + t[:, None] * step
            ok = _objective(model, xa, pa, trial) <= f0 + 1e-4 * t * slope + 1e-14 * np.abs(f0)
            if ok.all():
                break
            t = np.where(ok, t, 0.5 * t)
        unew = ua + t[:, None] * step
        tiny = np.linalg.norm(unew - ua, axis=1) <= 1e-13 * (1.0 + np.linalg.norm(ua, axis=1))
        u[act] = np.where(conv[:, None], ua, unew)
        idx = np.flatnonzero(act)
        done[idx[conv | tiny]] = True
    return u, done, gnorm


def _golden_fallback(model, x, p):
    """1D golden-section search inside the a-priori control bound."""
    c = model.constants
    pn = np.abs(p[:, 0]) if p.shape[1] == 1 else np.linalg.norm(p, axis=1)
    bound = c.M_u * (1.0 + pn) / model.omega(pn)
    bound = 1.5 * np.maximum(bound, 1.0)
    return golden_section(
        lambda v: _objective(model, x, p, v[:, None]), -bound, bound, tol=1e-13
    )[:, None]


def minimizer_w(model: ControlModel, x, p, tol_grad=TOL_GRAD, max_iter=MAX_ITER):
    """Unique minimiser w(x, p) of u -> F(x,u) + b(x,u).p.

    Damped Newton from u = 0, with a golden-section fallback for scalar
    controls when Newton stalls.
    """
    xb, single = _as_batch(x, model.state_dim)
    pb, _ = _as_batch(p, model.state_dim)
    if model.policy is not None:
        w = np.asarray(model.policy(xb, pb), dtype=float).reshape(-1, model.control_dim)
        return w[0] if single else w
    u, done, gnorm = _newton(model, xb, pb, tol_grad, max_iter)
    if not done.all():
        bad = ~done
        if model.control_dim == 1:
            u[bad] = _golden_fallback(model, xb[bad], pb[bad])
            grad, _ = _grad_hess(model, xb[bad], pb[bad], u[bad])
            gn = np.linalg.norm(grad, axis=1)
            scale = 1.0 + np.abs(_objective(model, xb[bad], pb[bad], u[bad]))
            if np.any(gn > 1e-6 * scale):
                raise MinimizationError("golden-section fallback failed", u[bad], gn)
        else:
            raise MinimizationError("Newton did not converge", u[bad], gnorm[bad])
    return u[0] if single else u


def hamiltonian(model: ControlModel, x, p):
    """H(x, p) = -min_u {F(x,u) + b(x,u).p}."""
    xb, single = _as_batch(x, model.state_dim)
    pb, _ = _as_batch(p, model.state_dim)
    w = minimizer_w(model, xb, pb).reshape(-1, model.control_dim)
    h = -_objective(model, xb, pb, w)
    return float(h[0]) if single else h


def optimal_drift(model: ControlModel, x, p):
    """b(x, w(x, p)), which equals -D_p H(x, p)."""
    xb, single = _as_batch(x, model.state_dim)
    pb, _ = _as_batch(p, model.state_dim)
    w = minimizer_w(model, xb, pb).reshape(-1, model.control_dim)
    b = model.drift(xb, w)
    return b[0] if single else b


# ---------------------------------------------------------------- assumption probes

@dataclass(frozen=True)
class ProbePlan:
    """Boxes and sample counts for sampled assumption checks.

    :param x_box: half-width of the state box, centred at 0
    :param u_box: half-width of the control box
    :param p_radius: largest momentum norm probed
    :param n_samples: points per check
    :param seed: RNG seed
    """

    x_box: float = 10.0
    u_box: float = 5.0
    p_radius: float = 5.0
    n_samples: int = 2000
    seed: int = 0
    tol: float = 1e-6


@dataclass
class AssumptionCheck:
    name: str
    worst: float
    declared: float
    passed: bool


@dataclass
class AssumptionReport:
    checks: list
    omega_table: list
    probe: ProbePlan

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def get(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _box_points(rng, n, dim, half, include_corners=True):
    pts = rng.uniform(-half, half, size=(n, dim))
    if include_corners:
        corners = np.array(np.meshgrid(*[[-half, half]] * dim)).reshape(dim, -1).T
        pts[: len(corners)] = corners[: n]
    return pts


def _jac_x(fun, x, u, out_dim):
    """Finite-difference Jacobian in x of a batch map (x, u) -> (n, out_dim)."""
    n, d = x.shape
    jac = np.empty((n, out_dim, d))
    for k in range(d):
        h = fd_step(x[:, k])[:, None]
        up, dn = x.copy(), x.copy()
        up[:, k] += h[:, 0]
        dn[:, k] -= h[:, 0]
        jac[:, :, k] = (fun(up, u).reshape(n, out_dim) - fun(dn, u).reshape(n, out_dim)) / (2.0 * h)
    return jac


def _jac_u(fun, x, u, out_dim):
    swapped = lambda uu, xx: fun(xx, uu)
    return _jac_x(swapped, u, x, out_dim)


def check_assumptions(model: ControlModel, probe: ProbePlan = ProbePlan()) -> AssumptionReport:
    """Sampled necessary-condition tests of the standing assumptions.

    A pass only means no sampled point contradicts the declared constants.
    """
    rng = np.random.default_rng(probe.seed)
    d, q, n = model.state_dim, model.control_dim, probe.n_samples
    c = model.constants
    x = _box_points(rng, n, d, probe.x_box)
    u = _box_points(rng, n, q, probe.u_box)
    checks = []

    def add(name, worst, declared, tol=probe.tol):
        ok = worst <= declared * (1.0 + tol) + tol
        checks.append(AssumptionCheck(name, float(worst), float(declared), bool(ok)))

    jb_u = _jac_u(model.drift, x, u, d)
    add("drift_du", np.max(np.linalg.norm(jb_u, ord=2, axis=(1, 2))), c.M_u)
    zero_u = np.zeros((n, q))
    jf_u0 = _jac_u(lambda xx, uu: model.running_cost(xx, uu)[:, None], x, zero_u, 1)
    add("cost_du_at_zero", np.max(np.linalg.norm(jf_u0[:, 0, :], axis=1)), c.M_u)

    # Lipschitz in x: random pairs plus local slopes (catches the box corners)
    x2 = _box_points(rng, n, d, probe.x_box, include_corners=False)
    dist = np.linalg.norm(x - x2, axis=1)
    keep = dist > 1e-9
    slope_pairs = np.abs(model.running_cost(x, u) - model.running_cost(x2, u))[keep] / dist[keep]
    jf_x = _jac_x(lambda xx, uu: model.running_cost(xx, uu)[:, None], x, u, 1)
    add("cost_lip_x", max(slope_pairs.max(initial=0.0), np.linalg.norm(jf_x[:, 0, :], axis=1).max()), c.M_F_x)
    g1, g2 = model.terminal_cost(x), model.terminal_cost(x2)
    jg = _jac_x(lambda xx, uu: model.terminal_cost(xx)[:, None], x, u, 1)
    add("terminal_lip", max((np.abs(g1 - g2)[keep] / dist[keep]).max(initial=0.0),
                            np.linalg.norm(jg[:, 0, :], axis=1).max()), c.M_g_x)

    jb_x = _jac_x(model.drift, x, u, d)
    add("drift_dx", np.max(np.linalg.norm(jb_x, ord=2, axis=(1, 2))), c.M_x)
    # mixed and second x-derivatives through differences of first derivatives;
    # nested differencing leaves ~1e-7 noise, hence the looser tolerance
    hx = 1e-3
    jb_x_shift = _jac_x(model.drift, x, u + hx, d)
    jf_x_shift = _jac_x(lambda xx, uu: model.running_cost(xx, uu)[:, None], x, u + hx, 1)
    mixed = max(np.max(np.abs(jb_x_shift - jb_x)), np.max(np.abs(jf_x_shift - jf_x))) / hx
    add("mixed_xu", mixed, c.M_xu, tol=1e-3)
    jb_x2 = _jac_x(model.drift, x + hx, u, d)
    jf_x2 = _jac_x(lambda xx, uu: model.running_cost(xx, uu)[:, None], x + hx, u, 1)
    second = max(np.max(np.abs(jb_x2 - jb_x)), np.max(np.abs(jf_x2 - jf_x))) / hx
    add("second_xx", second, c.M_xx, tol=1e-2)

    # strong convexity of u -> F + b.p against omega_{|p|}
    radii = np.linspace(0.0, probe.p_radius, 6)
    pdir = rng.normal(size=(n, d))
    pdir /= np.linalg.norm(pdir, axis=1, keepdims=True)
    omega_table = []
    worst_gap = -np.inf
    for R in radii:
        pp = pdir * rng.uniform(0.0, R, size=(n, 1)) if R > 0 else np.zeros((n, d))
        _, hess = _grad_hess(model, x, pp, u)
        eig = np.linalg.eigvalsh(hess)[:, 0]
        omega_table.append((float(R), float(eig.min())))
        worst_gap = max(worst_gap, float(np.max(model.omega(R) - eig)))
    add("convexity_deficit", max(worst_gap, 0.0), 0.0)
    return AssumptionReport(checks, omega_table, probe)


# ---------------------------------------------------------------- example family

def _zero_field(x):
    return np.zeros_like(x)


def _zero_scalar(x):
    return np.zeros(x.shape[0])


@dataclass
class FkExampleParams:
    """Parameters of the family b = -alpha x + gamma(x) + u, F = ell(|u|) + f(x).

    :param alpha: linear pull strength, > 0
    :param sigma: noise amplitude
    :param gamma: bounded vector field, batch (n, d) -> (n, d); None for zero
    :param gamma_sup: declared bound on |gamma|
    :param gamma_lip: declared bound on |D gamma|
    :param gamma_d2: declared bound on |D^2 gamma|
    :param f_cost: state cost, batch (n, d) -> (n,); None for zero
    :param f_lip: Lipschitz constant of f
    :param f_d2: bound on |D^2 f|
    :param ell: "quadratic" (|u|^2/2) or "quartic" (|u|^4/4 + |u|^2/2)
    :param g_terminal: terminal cost, batch (n, d) -> (n,); None for zero
    :param g_lip: Lipschitz constant of g
    """

    alpha: float = 1.0
    sigma: float = float(np.sqrt(2.0))
    gamma: Optional[Callable] = None
    gamma_sup: float = 0.0
    gamma_lip: float = 0.0
    gamma_d2: float = 0.0
    f_cost: Optional[Callable] = None
    f_lip: float = 0.0
    f_d2: float = 0.0
    ell: str = "quadratic"
    g_terminal: Optional[Callable] = None
    g_lip: float = 0.0
    state_dim: int = 1
    check_box: float = 10.0
    name: str = "fk"


@dataclass(frozen=True)
class TwoRegime:
    """-<b0(x)-b0(x'), x-x'> >= kappa r^2 for r >= R and >= -L r^2 for r <= R."""

    kappa: float
    L: float
    R: float


def _validate_fk(params: FkExampleParams):
    if not params.alpha > 0:
        raise ValueError("alpha must be positive")
    if not params.sigma > 0:
        raise ValueError("sigma must be positive")
    if params.ell not in ("quadratic", "quartic"):
        raise ValueError(f"unknown ell {params.ell!r}")
    if params.gamma is None:
        return
    d = params.state_dim
    rng = np.random.default_rng(12345)
    pts = np.vstack([np.linspace(-params.check_box, params.check_box, 4001)[:, None].repeat(d, 1),
                     rng.uniform(-params.check_box, params.check_box, size=(2000, d))])
    vals = params.gamma(pts)
    if np.max(np.linalg.norm(vals, axis=1)) > params.gamma_sup * (1 + 1e-9) + 1e-12:
        raise ValueError("gamma exceeds its declared sup bound")
    jac = _jac_x(lambda xx, uu: params.gamma(xx), pts, pts, d)
    if np.max(np.linalg.norm(jac, ord=2, axis=(1, 2))) > params.gamma_lip * (1 + 1e-6) + 1e-8:
        raise ValueError("gamma exceeds its declared derivative bound")


def fk_two_regime(params: FkExampleParams) -> TwoRegime:
    """Two-regime dissipativity constants implied by alpha and the gamma bounds."""
    a, s, lip = params.alpha, params.gamma_sup, params.gamma_lip
    if s == 0:
        return TwoRegime(kappa=a, L=0.0, R=1.0)
    R = 4.0 * s / a
    return TwoRegime(kappa=a - 2.0 * s / R, L=max(lip - a, 0.0), R=R)


def fk_kappa_function(params: FkExampleParams):
    """Certified lower profile r -> (2/sigma^2)(alpha - min(Lip gamma, 2 sup|gamma| / r))."""
    a, s, lip = params.alpha, params.gamma_sup, params.gamma_lip
    scale = 2.0 / params.sigma ** 2

    def kappa(r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            loss = np.minimum(lip, np.where(r > 0, 2.0 * s / r, np.inf)) if s > 0 else np.zeros_like(r)
        return scale * (a - loss)

    return kappa


def make_example_fk(params: FkExampleParams) -> ControlModel:
    """Assemble the model of the example family with derived declared constants."""
    _validate_fk(params)
    d = params.state_dim
    a = params.alpha
    gamma = params.gamma or _zero_field
    f = params.f_cost or _zero_scalar
    g = params.g_terminal or _zero_scalar
    quartic = params.ell == "quartic"

    def drift(x, u):
        return -a * x + gamma(x) + u

    def ell(u):
        s = np.sum(u * u, axis=-1)
        return 0.25 * s * s + 0.5 * s if quartic else 0.5 * s

    def cost(x, u):
        return ell(u) + f(x)

    def cost_du(x, u):
        s = np.sum(u * u, axis=-1, keepdims=True)
        return (s + 1.0) * u if quartic else u

    def cost_duu(x, u):
        eye = np.broadcast_to(np.eye(d), (u.shape[0], d, d))
        if not quartic:
            return eye.copy()
        s = np.sum(u * u, axis=-1)[:, None, None]
        return (s + 1.0) * eye + 2.0 * u[:, :, None] * u[:, None, :]

    def drift_du(x, u):
        return np.broadcast_to(np.eye(d), (u.shape[0], d, d)).copy()

    policy = None if quartic else (lambda x, p: -np.asarray(p, dtype=float))
    constants = DeclaredConstants(
        M_u=1.0,
        M_F_x=params.f_lip,
        M_g_x=params.g_lip,
        M_x=a + params.gamma_lip,
        M_xx=max(params.gamma_d2, params.f_d2),
        M_xu=0.0,
    )
    return ControlModel(
        state_dim=d,
        control_dim=d,
        drift=drift,
        running_cost=cost,
        terminal_cost=g,
        sigma=params.sigma,
        convexity_modulus=_constant_modulus(1.0),
        constants=constants,
        drift_du=drift_du,
        cost_du=cost_du,
        cost_duu=cost_duu,
        policy=policy,
        affine_control=True,
        name=params.name,
    )


def uncontrolled_drift(model: ControlModel):
    """x -> b(x, 0) as a batch map."""
    return lambda x: model.drift(x, np.zeros((x.shape[0], model.control_dim)))
