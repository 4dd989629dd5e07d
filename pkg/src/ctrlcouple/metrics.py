"""Distances between 1D empirical measures and exponential-rate fits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _equalise(a, b, seed):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return a, b, "exact"
    rng = np.random.default_rng(seed)
    n = min(a.size, b.size)
    if a.size > n:
        a = rng.choice(a, size=n, replace=False)
    else:
        b = rng.choice(b, size=n, replace=False)
    return a, b, "subsampled"


def w1_empirical_1d(a, b, seed=0, return_method=False):
    """W1 between two empirical measures on the line.

    Sorted samples realise the optimal coupling for convex costs. Unequal
    sizes are reduced to the smaller one by seeded subsampling without
    replacement; pass ``return_method=True`` to see which path was taken.
    """
    a, b, method = _equalise(a, b, seed)
    d = float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return (d, method) if return_method else d


def w1_to_quantiles(samples, grid, density):
    """W1 between samples and a tabulated density, through its quantiles at (i - 1/2)/n."""
    samples = np.sort(np.asarray(samples, dtype=float).ravel())
    n = samples.size
    grid = np.asarray(grid, dtype=float)
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))))
    cdf /= cdf[-1]
    levels = (np.arange(n) + 0.5) / n
    q = np.interp(levels, cdf, grid)
    return float(np.mean(np.abs(samples - q)))


def wf_bracket(a, b, bundle, seed=0):
    """(C W1, mean f(|a - b|) under the sorted coupling): bounds on the twisted distance."""
    a, b, _ = _equalise(a, b, seed)
    gap = np.abs(np.sort(a) - np.sort(b))
    lower = bundle.C * float(np.mean(gap))
    upper = float(np.mean(bundle.f_eval(gap)))
    return lower, upper


@dataclass
class RateFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple


def fit_exponential_rate(times, values, window=None):
    """Least-squares slope of log(values) against time, negated."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, y = t[sel], y[sel]
    else:
        window = (float(t.min()), float(t.max()))
    if t.size < 2:
        raise ValueError("need at least two points in the window")
    if np.any(y <= 0):
        raise ValueError("values must be positive on the fit window")
    ly = np.log(y)
    slope, intercept = np.polyfit(t, ly, 1)
    resid = ly - (slope * t + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(rate=float(-slope), intercept=float(intercept), r_squared=float(min(max(r2, 0.0), 1.0)),
                   window=(float(window[0]), float(window[1])))
