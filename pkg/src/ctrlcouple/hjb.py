"""Backward solver for d_t phi = H(x, phi_x) - (sigma^2/2) phi_xx on a 1D grid.

Time stepping is SSP-RK2 (Heun), a convex combination of forward-Euler
steps, so the monotonicity of the spatial operator carries over. Space uses
central differences where the cell Peclet number |beta| dx / sigma^2 is at
most 1 (already monotone there) and upwind differences elsewhere.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ControlModel, minimizer_w

log = logging.getLogger(__name__)

N_BDRY = 5


class HJBError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be below x_max")
        if self.n_x < 3:
            raise ValueError("need at least 3 nodes")

    @classmethod
    def from_spacing(cls, x_min, x_max, dx):
        n = int(round((x_max - x_min) / dx)) + 1
        return cls(float(x_min), float(x_max), n)

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def x(self):
        return np.linspace(self.x_min, self.x_max, self.n_x)

    def index_of(self, x0=0.0):
        return int(np.argmin(np.abs(self.x - x0)))


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Snapshots of phi_t on the grid, newest time last (times increase to T)."""

    grid: Grid1D
    times: np.ndarray
    values: np.ndarray
    terminal_tag: str
    step_times: np.ndarray
    step_lip: np.ndarray
    step_hess: np.ndarray
    n_steps: int
    clamp_hits: int
    model_name: str = ""

    @property
    def T(self):
        return float(self.times[-1])

    def grads(self):
        g = self.__dict__.get("_grads")
        if g is None:
            g = np.gradient(self.values, self.grid.dx, axis=1)
            object.__setattr__(self, "_grads", g)
        return g

    def gradient_at(self, t, x):
        """grad phi_t(x) by linear interpolation in time and space."""
        grads = self.grads()
        t = float(np.clip(t, self.times[0], self.times[-1]))
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        j = min(max(j, 0), self.times.size - 2)
        t0, t1 = self.times[j], self.times[j + 1]
        a = (t - t0) / (t1 - t0)
        xs = self.grid.x
        g0 = np.interp(x, xs, grads[j])
        g1 = np.interp(x, xs, grads[j + 1])
        return (1.0 - a) * g0 + a * g1

    def value_at(self, t_index, x):
        return np.interp(x, self.grid.x, self.values[t_index])

    def to_csv(self, path, every=1):
        grads = self.grads()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "value", "grad", "hess"])
            for k in range(0, self.times.size, every):
                hess = _second_diff(self.values[k], self.grid.dx)
                for xi, v, g, h in zip(self.grid.x, self.values[k], grads[k], hess):
                    w.writerow([f"{self.times[k]:.10g}", f"{xi:.10g}", f"{v:.12g}", f"{g:.12g}", f"{h:.12g}"])


def _second_diff(v, dx):
    h = np.empty_like(v)
    h[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx ** 2
    h[0], h[-1] = h[1], h[-2]
    return h


def value_diagnostics(vf: ValueFunction, t_index: int, n_bdry: int = N_BDRY):
    """Gradient, Hessian and their sup norms at one stored time."""
    v = vf.values[t_index]
    dx = vf.grid.dx
    grad = np.gradient(v, dx)
    hess = _second_diff(v, dx)
    inner = hess[n_bdry:-n_bdry] if n_bdry > 0 else hess
    return {
        "lip_norm": float(np.max(np.abs(grad))),
        "grad": grad,
        "hess_sup": float(np.max(np.abs(inner))) if inner.size else 0.0,
        "hess": hess,
    }


class _Operator:
    """Spatial operator phi -> (sigma^2/2) phi_xx - H(x, phi_x) with ghost-node boundaries."""

    def __init__(self, model: ControlModel, grid: Grid1D, grad_clamp):
        self.model = model
        self.dx = grid.dx
        self.x2 = grid.x[:, None]
        self.half_s2 = 0.5 * model.sigma ** 2
        self.s2 = model.sigma ** 2
        self.clamp = grad_clamp
        self.clamp_hits = 0

    def _clamp(self, p):
        if self.clamp is None:
            return p
        if abs(p) > self.clamp:
            self.clamp_hits += 1
            return float(np.sign(p) * self.clamp)
        return p

    def __call__(self, v):
        dx = self.dx
        d = np.diff(v) / dx
        dplus = np.empty_like(v)
        dminus = np.empty_like(v)
        dplus[:-1] = d
        dminus[1:] = d
        dminus[0] = self._clamp(d[0])
        dplus[-1] = self._clamp(d[-1])
        pc = 0.5 * (dplus + dminus)
        m = self.model
        w = minimizer_w(m, self.x2, pc[:, None])
        beta = m.drift(self.x2, w)[:, 0]
        p = pc
        steep = np.abs(beta) * dx > self.s2
        if steep.any():
            p = np.where(steep, np.where(beta > 0, dplus, dminus), pc)
            w = minimizer_w(m, self.x2, p[:, None])
            beta = m.drift(self.x2, w)[:, 0]
        neg_h = m.running_cost(self.x2, w) + beta * p
        lap = (dplus - dminus) / dx
        return self.half_s2 * lap + neg_h, float(np.max(np.abs(beta)))


def solve_backward(model: ControlModel, terminal, T, grid: Grid1D, dt=None, store_dt=None,
                   grad_clamp=None, safety=0.9, terminal_tag="g") -> ValueFunction:
    """Integrate the HJB equation from t = T down to t = 0.

    ``terminal`` is an array on the grid or a batch callable. ``dt`` caps the
    step; each step is also limited by dx^2 / (sigma^2 + dx sup|beta|), with
    the step shrunk to ``safety`` times that limit when the cap is too large.
    Snapshots are kept every ``store_dt`` (default T/200).
    """
    if model.state_dim != 1:
        raise ValueError("the PDE solver is one-dimensional")
    x = grid.x
    v = np.asarray(terminal(x[:, None]) if callable(terminal) else terminal, dtype=float).copy()
    if v.shape != x.shape:
        raise ValueError("terminal values do not match the grid")
    T = float(T)
    store_dt = T / 200.0 if store_dt is None else float(store_dt)
    n_store = max(1, int(round(T / store_dt)))
    store_times = np.linspace(0.0, T, n_store + 1)
    op = _Operator(model, grid, grad_clamp)
    dx = grid.dx

    snaps = [v.copy()]
    s_times, s_lip, s_hess = [T], [np.max(np.abs(np.diff(v))) / dx], [_interior_hess(v, dx)]
    t = T
    k_store = n_store - 1
    steps = 0
    while t > 1e-14 * max(T, 1.0):
        L1, bmax = op(v)
        cfl = dx * dx / (model.sigma ** 2 + dx * bmax)
        h = safety * cfl if dt is None or dt > cfl else float(dt)
        if h < 1e-14 * max(T, 1.0):
            raise HJBError(f"CFL limit {cfl:.3e} collapsed at t = {t:.6g}")
        target = store_times[k_store]
        h = min(h, t - target)
        v1 = v + h * L1
        L2, bmax2 = op(v1)
        if h > dx * dx / (model.sigma ** 2 + dx * bmax2) * (1.0 + 1e-9):
            # second stage saw a faster drift: redo with the tighter limit
            cfl2 = dx * dx / (model.sigma ** 2 + dx * bmax2)
            h = min(safety * cfl2, t - target)
            v1 = v + h * L1
            L2, _ = op(v1)
        v = 0.5 * v + 0.5 * (v1 + h * L2)
        t = target if abs(t - h - target) <= 1e-12 * max(T, 1.0) else t - h
        steps += 1
        if not np.all(np.isfinite(v)):
            raise HJBError(f"non-finite values at step {steps} (t = {t:.6g})")
        s_times.append(t)
        s_lip.append(np.max(np.abs(np.diff(v))) / dx)
        s_hess.append(_interior_hess(v, dx))
        if t == target:
            snaps.append(v.copy())
            k_store -= 1
            if k_store < 0:
                break
    if op.clamp_hits:
        warnings.warn(f"gradient clamp bound {op.clamp_hits} times at the boundary; widen the domain",
                      RuntimeWarning, stacklevel=2)
    return ValueFunction(
        grid=grid,
        times=store_times,
        values=np.array(snaps[::-1]),
        terminal_tag=terminal_tag,
        step_times=np.array(s_times[::-1]),
        step_lip=np.array(s_lip[::-1]),
        step_hess=np.array(s_hess[::-1]),
        n_steps=steps,
        clamp_hits=op.clamp_hits,
        model_name=model.name,
    )


def _interior_hess(v, dx, n_bdry=N_BDRY):
    inner = v[n_bdry - 1:v.size - n_bdry + 1]
    if inner.size < 3:
        return 0.0
    return float(np.max(np.abs(inner[2:] - 2.0 * inner[1:-1] + inner[:-2])) / dx ** 2)


# ---------------------------------------------------------------- ergodic problem

@dataclass
class ErgodicSolution:
    alpha_inf: float
    phi_inf: np.ndarray
    grid: Grid1D
    residual: float
    iterations: int
    increments_sup: list = field(default_factory=list)
    increments_lip: list = field(default_factory=list)
    unit_horizon: float = 1.0
    alpha_convention: str = "phi^{T,phi_inf}_0 = phi_inf + alpha_inf * T"

    @property
    def ratios(self):
        inc = np.asarray(self.increments_lip)
        return (inc[1:] / inc[:-1]).tolist() if inc.size > 1 else []

    def gradient(self):
        return np.gradient(self.phi_inf, self.grid.dx)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "phi_inf", "grad"])
            for row in zip(self.grid.x, self.phi_inf, self.gradient()):
                w.writerow([f"{v:.12g}" for v in row])


def ergodic_solve(model: ControlModel, grid: Grid1D, unit_horizon=1.0, tol=1e-6, max_iter=60,
                  g0=None, dt=None, grad_clamp=None) -> ErgodicSolution:
    """Fixed point of g -> phi^{T,g}_0 - phi^{T,g}_0(0) with T = unit_horizon.

    After convergence one extra solve gives the residual and
    alpha_inf = phi^{T,g}_0(0) / T, i.e. phi^{T,phi_inf}_0 = phi_inf + alpha_inf T.
    """
    i0 = grid.index_of(0.0)
    g = np.zeros(grid.n_x) if g0 is None else np.asarray(g0, dtype=float) - np.asarray(g0)[i0]
    inc_sup, inc_lip = [], []
    T = float(unit_horizon)
    for it in range(1, max_iter + 1):
        v0 = solve_backward(model, g, T, grid, dt=dt, store_dt=T, grad_clamp=grad_clamp).values[0]
        new = v0 - v0[i0]
        diff = new - g
        inc_sup.append(float(np.max(np.abs(diff))))
        inc_lip.append(float(np.max(np.abs(np.diff(diff))) / grid.dx))
        g = new
        if inc_sup[-1] < tol:
            break
    else:
        raise HJBError(f"ergodic iteration stalled after {max_iter} steps; last increment {inc_sup[-1]:.3e}")
    v0 = solve_backward(model, g, T, grid, dt=dt, store_dt=T, grad_clamp=grad_clamp).values[0]
    residual = float(np.max(np.abs(v0 - v0[i0] - g)))
    alpha = float((v0[i0] - g[i0]) / T)
    return ErgodicSolution(alpha, g, grid, residual, it, inc_sup, inc_lip, T)


def ergodic_drift(model: ControlModel, sol: ErgodicSolution):
    """Batch map x -> b(x, w(x, phi_inf'(x))) with the gradient interpolated on the grid."""
    xs = sol.grid.x
    grad = sol.gradient()

    def beta(x):
        x = np.asarray(x, dtype=float).reshape(-1, 1)
        p = np.interp(x[:, 0], xs, grad)[:, None]
        return model.drift(x, minimizer_w(model, x, p))

    return beta


# ---------------------------------------------------------------- stability in the terminal cost

@dataclass
class DecayCurve:
    times: np.ndarray
    lip_distance: np.ndarray


def stability_decay(model: ControlModel, g, g2, T, grid: Grid1D, dt=None, store_dt=None) -> DecayCurve:
    """Discrete Lipschitz norm of phi^{T,g}_t - phi^{T,g'}_t at the shared snapshot times."""
    a = solve_backward(model, g, T, grid, dt=dt, store_dt=store_dt)
    b = solve_backward(model, g2, T, grid, dt=dt, store_dt=store_dt)
    diff = a.values - b.values
    lip = np.max(np.abs(np.diff(diff, axis=1)), axis=1) / grid.dx
    return DecayCurve(a.times, lip)


def optimal_feedback_drift(model: ControlModel, vf: ValueFunction):
    """(t, x) -> b(x, w(x, grad phi_t(x))) for forward simulation on [0, T]."""

    def beta(t, x):
        p = vf.gradient_at(t, x[:, 0])[:, None]
        return model.drift(x, minimizer_w(model, x, p))

    return beta
