"""Euler-Maruyama ensembles and couplings of diffusions.

Randomness comes from Philox streams keyed by (seed, block index); paths are
split into fixed-size blocks, so the worker count only changes scheduling.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._numerics import cumulative_simpson
from .model import ControlModel, minimizer_w

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    ``merge_threshold`` defaults to 0.1 sigma sqrt(dt) per run. ``out_every``
    is the output stride in steps. ``block_size`` fixes the RNG stream layout
    and must stay the same for runs that should agree.
    """

    dt: float = 1e-3
    n_paths: int = 1000
    horizon: float = 1.0
    seed: int = 0
    merge_threshold: Optional[float] = None
    n_workers: int = 1
    out_every: int = 10
    block_size: int = 1024

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed the horizon")
        if self.n_paths < 1 or self.block_size < 1 or self.n_workers < 1 or self.out_every < 1:
            raise ValueError("n_paths, block_size, n_workers and out_every must be positive")
        if self.merge_threshold is not None and not self.merge_threshold > 0:
            raise ValueError("merge_threshold must be positive")

    @property
    def n_steps(self):
        return int(round(self.horizon / self.dt))

    def out_steps(self):
        n = self.n_steps
        steps = list(range(0, n + 1, self.out_every))
        if steps[-1] != n:
            steps.append(n)
        return np.array(steps)

    def delta_merge(self, sigma):
        return self.merge_threshold if self.merge_threshold is not None else 0.1 * sigma * np.sqrt(self.dt)


def block_rng(seed, block):
    """Independent generator for one block of paths."""
    key = (int(block) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _run_blocks(cfg: SimConfig, worker):
    sizes = [min(cfg.block_size, cfg.n_paths - s) for s in range(0, cfg.n_paths, cfg.block_size)]
    jobs = [(b, n) for b, n in enumerate(sizes)]
    call = lambda job: worker(block_rng(cfg.seed, job[0]), job[1])
    if cfg.n_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
            return list(pool.map(call, jobs))
    return [call(j) for j in jobs]


def _cat(results, key, axis=0):
    return np.concatenate([r[key] for r in results], axis=axis)


def _init_points(init, rng, n, d):
    if callable(init):
        x = np.asarray(init(rng, n), dtype=float)
    else:
        x = np.broadcast_to(np.asarray(init, dtype=float).reshape(-1, d), (n, d))
    return np.array(x, dtype=float).reshape(n, d)


def _mean_se(v):
    n = v.shape[-1]
    m = v.mean(axis=-1)
    se = v.std(axis=-1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, se


# ---------------------------------------------------------------- plain ensembles

@dataclass
class Ensemble:
    times: np.ndarray
    terminal: np.ndarray
    flagged: int
    paths: Optional[np.ndarray] = None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample"])
            for v in self.terminal[:, 0]:
                w.writerow([f"{v:.12g}"])


def simulate_paths(drift: Callable, sigma, init, cfg: SimConfig, dim=1, record=False) -> Ensemble:
    """Euler-Maruyama for dX = drift(t, X) dt + sigma dB.

    Paths that become non-finite are flagged, frozen at 0 and excluded.
    """
    steps = cfg.out_steps()
    out = set(steps.tolist())
    sq = np.sqrt(cfg.dt)

    def worker(rng, n):
        x = _init_points(init, rng, n, dim)
        bad = np.zeros(n, dtype=bool)
        rec = [x.copy()] if record else None
        for k in range(cfg.n_steps):
            z = rng.standard_normal((n, dim))
            x = x + drift(k * cfg.dt, x) * cfg.dt + sigma * sq * z
            nf = ~np.all(np.isfinite(x), axis=1)
            if nf.any():
                bad |= nf
                x[nf] = 0.0
            if record and (k + 1) in out:
                rec.append(x.copy())
        return {"x": x, "bad": bad, "rec": np.array(rec) if record else np.zeros((0, n, dim))}

    res = _run_blocks(cfg, worker)
    bad = _cat(res, "bad")
    x = _cat(res, "x")[~bad]
    paths = _cat(res, "rec", axis=1)[:, ~bad] if record else None
    if bad.any():
        log.warning("%d paths left the finite range and were excluded", int(bad.sum()))
    return Ensemble(steps * cfg.dt, x, int(bad.sum()), paths)


# ---------------------------------------------------------------- coupling runs

@dataclass
class CouplingRun:
    times: np.ndarray
    mean_dist: np.ndarray
    dist_se: np.ndarray
    coalesced_frac: np.ndarray
    tau: np.ndarray
    mean_f: Optional[np.ndarray] = None
    f_se: Optional[np.ndarray] = None
    flagged: int = 0
    extra: dict = field(default_factory=dict)

    def survival(self):
        return 1.0 - self.coalesced_frac

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "mean_dist", "mean_f_r", "coalesced_frac", "stderr"])
            mf = self.mean_f if self.mean_f is not None else np.full_like(self.times, np.nan)
            se = self.f_se if self.f_se is not None else self.dist_se
            for row in zip(self.times, self.mean_dist, mf, self.coalesced_frac, se):
                w.writerow([f"{v:.10g}" for v in row])


def _finish(cfg, res, bundle, extra=None):
    bad = _cat(res, "bad")
    dist = _cat(res, "dist", axis=1)[:, ~bad]
    merged = _cat(res, "merged", axis=1)[:, ~bad]
    tau = _cat(res, "tau")[~bad]
    m, se = _mean_se(dist)
    mf = fse = None
    if bundle is not None:
        mf, fse = _mean_se(bundle.f_eval(dist))
    extra = dict(extra or {})
    extra["terminal"] = (_cat(res, "x")[~bad], _cat(res, "y")[~bad])
    return CouplingRun(cfg.out_steps() * cfg.dt, m, se, merged.mean(axis=1), tau, mf, fse,
                       int(bad.sum()), extra)


def _reflect(dB, e):
    return dB - 2.0 * e * np.sum(e * dB, axis=1, keepdims=True)


def _coupled_worker(cfg, sigma, x0, y0, drift_x, drift_y, mode, delta, dim, cost=None):
    """Shared stepping loop.

    mode "merge": reflection-maximal coupling of the two Euler steps. The
    proposal x' is accepted for y with probability min(1, p_y(x')/p_x(x')),
    otherwise y takes the reflected increment; both one-step laws stay exact.
    Pairs closer than delta are glued as well. mode "switch": reflection while r > delta,
    synchronous otherwise, never glued.
    """
    out = set(cfg.out_steps().tolist())
    sq = np.sqrt(cfg.dt)
    dt = cfg.dt

    def worker(rng, n):
        x = np.broadcast_to(np.asarray(x0, float).reshape(1, dim), (n, dim)).copy()
        y = np.broadcast_to(np.asarray(y0, float).reshape(1, dim), (n, dim)).copy()
        merged = np.linalg.norm(x - y, axis=1) <= (delta if mode == "merge" else -1.0)
        if mode == "merge":
            y[merged] = x[merged]
        tau = np.where(merged, 0.0, np.inf)
        bad = np.zeros(n, dtype=bool)
        dists, mflags = [], []
        jx = np.zeros(n)
        jy = np.zeros(n)

        def record():
            dists.append(np.linalg.norm(x - y, axis=1))
            mflags.append(merged.copy())

        if 0 in out:
            record()
        for k in range(cfg.n_steps):
            t = k * dt
            dB = sq * rng.standard_normal((n, dim))
            if cost is None:
                bx, by = drift_x(t, x), drift_y(t, y)
            else:
                bx, by, fx, fy = cost(t, x, y)
                jx += fx * dt
                jy += fy * dt
            mx = x + bx * dt
            my = y + by * dt
            if mode == "merge":
                u = rng.random(n)
                diff = mx - my
                r = np.linalg.norm(diff, axis=1)
                active = ~merged & (r > 0)
            else:
                diff = x - y
                r = np.linalg.norm(diff, axis=1)
                active = r > delta
            e = np.zeros_like(diff)
            e[active] = diff[active] / r[active, None]
            dBy = np.where(active[:, None], _reflect(dB, e), dB)
            x = mx + sigma * dB
            y = my + sigma * dBy
            if mode == "merge":
                # log p_y(x') - log p_x(x') for the two Gaussian steps
                s2 = 2.0 * sigma ** 2 * dt
                logr = (np.sum((sigma * dB) ** 2, axis=1) - np.sum((x - my) ** 2, axis=1)) / s2
                hit = ~merged & ((np.log(np.maximum(u, 1e-300)) <= logr)
                                 | (np.linalg.norm(x - y, axis=1) < delta))
                if hit.any():
                    merged |= hit
                    tau[hit] = (k + 1) * dt
                y[merged] = x[merged]
            nf = ~(np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(y), axis=1))
            if nf.any():
                bad |= nf
                x[nf] = 0.0
                y[nf] = 0.0
            if (k + 1) in out:
                record()
        return {"dist": np.array(dists), "merged": np.array(mflags), "tau": tau, "bad": bad,
                "x": x, "y": y, "jx": jx, "jy": jy}

    return worker


def reflection_coupling(drift: Callable, sigma, x, x2, cfg: SimConfig, bundle=None, dim=1) -> CouplingRun:
    """Coupling by reflection with a shared drift; paths glue on meeting."""
    delta = cfg.delta_merge(sigma)
    w = _coupled_worker(cfg, sigma, x, x2, drift, drift, "merge", delta, dim)
    res = _run_blocks(cfg, w)
    return _finish(cfg, res, bundle, {"delta_merge": delta})


def controlled_reflection_coupling(model: ControlModel, vf, x, x2, cfg: SimConfig, bundle=None) -> CouplingRun:
    """Optimal path from x and a reflected path from x2 that reuses its control.

    The second path applies the control u_s = w(X_s, grad phi_s(X_s)) read off
    the first path. ``extra`` holds the per-path cost gap J(x2-path) - J(x-path).
    """
    if model.state_dim != 1:
        raise ValueError("value functions are one-dimensional")
    if vf.model_name != model.name:
        raise ValueError(f"value function was solved for {vf.model_name!r}, not {model.name!r}")
    if abs(cfg.horizon - vf.T) > 1e-12 * max(1.0, vf.T):
        raise ValueError(f"horizon {cfg.horizon} does not match the value function horizon {vf.T}")

    def cost(t, xs, ys):
        p = vf.gradient_at(t, xs[:, 0])[:, None]
        u = minimizer_w(model, xs, p)
        return (model.drift(xs, u), model.drift(ys, u),
                model.running_cost(xs, u), model.running_cost(ys, u))

    delta = cfg.delta_merge(model.sigma)
    w = _coupled_worker(cfg, model.sigma, x, x2, None, None, "merge", delta, 1, cost=cost)
    res = _run_blocks(cfg, w)
    bad = _cat(res, "bad")
    xt, yt = _cat(res, "x")[~bad], _cat(res, "y")[~bad]
    gap = (_cat(res, "jy")[~bad] + model.terminal_cost(yt)) - (_cat(res, "jx")[~bad] + model.terminal_cost(xt))
    m, se = _mean_se(gap)
    return _finish(cfg, res, bundle, {"delta_merge": delta, "cost_gap": gap,
                                      "cost_gap_mean": float(m), "cost_gap_se": float(se)})


def two_drift_coupling(drift1: Callable, drift2: Callable, sigma, x, x2, delta_switch, cfg: SimConfig,
                       bundle=None, dim=1) -> CouplingRun:
    """Reflection while |dX| > delta_switch, synchronous below; never glued."""
    w = _coupled_worker(cfg, sigma, x, x2, drift1, drift2, "switch", float(delta_switch), dim)
    res = _run_blocks(cfg, w)
    return _finish(cfg, res, bundle, {"delta_switch": float(delta_switch)})


# ---------------------------------------------------------------- dominating process

@dataclass
class StickyRun:
    times: np.ndarray
    mean_r: np.ndarray
    r_se: np.ndarray
    mean_f: Optional[np.ndarray]
    f_se: Optional[np.ndarray]
    zero_frac: np.ndarray


def sticky_dominating(kappa0, M_schedule: Callable, sigma, r0, cfg: SimConfig, bundle=None, r_cap=None) -> StickyRun:
    """dr = (M_s - (sigma^2/2) kappa0(r) r) ds + 2 sigma 1{r>0} dW on [0, inf), sticky at 0.

    Simulated as a birth-death chain on the lattice h N with h = 2 sigma sqrt(dt)
    and upwinded rates. From 0 the only move is up, at rate M_s/h, which
    encodes the sticky boundary. Plain Euler clipped at 0 converges to the
    reflected process instead, so it is not used. kappa0 is frozen beyond
    ``r_cap`` (default: end of its tail window).
    """
    cap = float(r_cap if r_cap is not None else kappa0.tail_window[1])
    steps = cfg.out_steps()
    out = set(steps.tolist())
    half = 0.5 * sigma ** 2
    h = 2.0 * sigma * np.sqrt(cfg.dt)
    diff = 2.0 * sigma ** 2 / h ** 2  # (2 sigma)^2 / (2 h^2)
    ts = np.arange(cfg.n_steps + 1) * cfg.dt
    m_max = max(float(np.max([M_schedule(t) for t in ts])), 0.0)
    r_hi = 2.0 * max(cap, float(r0)) + 10.0 * sigma * np.sqrt(cfg.horizon) + m_max * cfg.horizon
    rr = np.linspace(0.0, r_hi, 2001)
    b_max = m_max + half * float(np.max(kappa0(np.clip(rr, 1e-12, cap)) * rr))
    n_sub = max(1, int(np.ceil(cfg.dt * (2.0 * diff + b_max / h) * 1.05)))
    du = cfg.dt / n_sub

    def worker(rng, n):
        lo = np.floor(r0 / h)
        frac = r0 / h - lo
        i = (lo + (rng.random(n) < frac)).astype(np.int64)
        rec = [i * h] if 0 in out else []
        for k in range(cfg.n_steps):
            for j in range(n_sub):
                M = M_schedule(k * cfg.dt + j * du)
                r = i * h
                b = np.clip(M - half * kappa0(np.clip(r, 1e-12, cap)) * r, -b_max, b_max)
                up = np.where(i > 0, diff + np.maximum(b, 0.0) / h, max(M, 0.0) / h) * du
                dn = np.where(i > 0, diff + np.maximum(-b, 0.0) / h, 0.0) * du
                u = rng.random(n)
                i = i + (u < up) - ((u >= up) & (u < up + dn))
            if (k + 1) in out:
                rec.append(i * h)
        return {"r": np.array(rec, dtype=float)}

    rs = _cat(_run_blocks(cfg, worker), "r", axis=1)
    m, se = _mean_se(rs)
    mf = fse = None
    if bundle is not None:
        mf, fse = _mean_se(bundle.f_eval(rs))
    return StickyRun(steps * cfg.dt, m, se, mf, fse, (rs == 0).mean(axis=1))


# ---------------------------------------------------------------- invariant measures

def invariant_sampler(drift: Callable, sigma, burn_in, thinning, cfg: SimConfig, per_chain=1, x0=0.0):
    """cfg.n_paths chains run for ``burn_in``, then sampled every ``thinning`` time units."""
    n_burn = int(round(burn_in / cfg.dt))
    n_thin = max(1, int(round(thinning / cfg.dt)))
    sq = np.sqrt(cfg.dt)

    def worker(rng, n):
        x = np.full((n, 1), float(x0))
        out = []
        for k in range(n_burn + n_thin * (per_chain - 1) + 1):
            if k >= n_burn and (k - n_burn) % n_thin == 0:
                out.append(x[:, 0].copy())
            if len(out) == per_chain:
                break
            x = x + drift(x) * cfg.dt + sigma * sq * rng.standard_normal((n, 1))
        return {"s": np.array(out).T.ravel()}

    s = _cat(_run_blocks(cfg, worker), "s")
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("non-finite invariant samples")
    return s


@dataclass
class DensityTable:
    x: np.ndarray
    density: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "density"])
            for a, b in zip(self.x, self.density):
                w.writerow([f"{a:.12g}", f"{b:.12g}"])


def stationary_density_1d(drift: Callable, sigma, grid, edge_tol=1e-8) -> DensityTable:
    """Density proportional to exp((2/sigma^2) int_0^x beta) on a grid.

    Raises when the density is still sizeable at the grid ends, which is how a
    non-normalisable (or badly truncated) density shows up.
    """
    x = np.asarray(grid, dtype=float)
    beta = np.asarray(drift(x[:, None]), dtype=float).reshape(-1)
    U = (2.0 / sigma ** 2) * cumulative_simpson(x, beta)
    if not np.all(np.isfinite(U)):
        raise ValueError("potential is not finite on the grid")
    rho = np.exp(U - U.max())
    if max(rho[0], rho[-1]) > edge_tol:
        raise ValueError(f"density does not decay at the grid ends (edge/peak {max(rho[0], rho[-1]):.3e})")
    rho /= cumulative_simpson(x, rho)[-1]
    return DensityTable(x, rho)
