"""Small numerical kernels shared by several modules."""
from __future__ import annotations

import numpy as np

EPS = np.finfo(float).eps
FD_STEP = EPS ** (1.0 / 3.0)
FD_STEP2 = EPS ** (1.0 / 4.0)
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def fd_step(scale, base=FD_STEP):
    """Central-difference step ``base * max(1, |scale|)``."""
    return base * np.maximum(1.0, np.abs(scale))


def golden_section(fun, lo, hi, tol=1e-10, max_iter=200):
    """Vectorised golden-section minimisation of a unimodal function.

    ``fun`` maps an array of abscissae (same shape as ``lo``) to values.
    Returns the abscissa of the minimum found in each bracket.
    """
    a = np.array(lo, dtype=float, copy=True)
    b = np.array(hi, dtype=float, copy=True)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if np.all(np.abs(b - a) <= tol * (1.0 + np.abs(a) + np.abs(b))):
            break
        left = fc < fd
        # minimum lies in [a, d] where left, else in [c, b]
        a_new = np.where(left, a, c)
        b_new = np.where(left, d, b)
        c_new = np.where(left, b_new - _INVPHI * (b_new - a_new), d)
        d_new = np.where(left, c, a_new + _INVPHI * (b_new - a_new))
        f_eval = fun(np.where(left, c_new, d_new))
        fc, fd = np.where(left, f_eval, fd), np.where(left, fc, f_eval)
        a, b, c, d = a_new, b_new, c_new, d_new
    return 0.5 * (a + b)


def cumulative_simpson(x, y):
    """Cumulative integral of samples ``y`` on a nonuniform grid ``x``.

    Composite Simpson on consecutive interval pairs; the odd nodes use the
    partial integral of the same quadratic interpolant, so the result is
    exact for piecewise quadratics on each pair. An odd final interval is
    closed with the quadratic through the last three nodes.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    out = np.zeros(n)
    if n < 2:
        return out
    if n == 2:
        out[1] = 0.5 * (x[1] - x[0]) * (y[0] + y[1])
        return out
    m = (n - 1) // 2
    idx = 2 * np.arange(m)
    first, full = _quad_pieces(
        (x[idx], x[idx + 1], x[idx + 2]), (y[idx], y[idx + 1], y[idx + 2])
    )
    even = np.concatenate(([0.0], np.cumsum(full)))
    out[0:2 * m + 1:2] = even
    out[1:2 * m:2] = even[:-1] + first
    if (n - 1) % 2 == 1:
        # last interval sits alone: close it with the quadratic through the last three nodes
        first, full = _quad_pieces(x[-3:], y[-3:])
        out[-1] = out[-2] + (full - first)
    return out


def _quad_pieces(x3, y3):
    """Integrals of the interpolating quadratic over [x0,x1] and [x0,x2]."""
    x0, x1, x2 = x3
    y0, y1, y2 = y3
    h0, h1 = x1 - x0, x2 - x1
    h = h0 + h1
    full = h / 6.0 * (y0 * (2.0 - h1 / h0) + y1 * h * h / (h0 * h1) + y2 * (2.0 - h0 / h1))
    # partial integral over the first interval of the Lagrange quadratic
    first = h0 * (
        y0 * (2.0 * h0 + 3.0 * h1) / (6.0 * h)
        + y1 * (h0 + 3.0 * h1) / (6.0 * h1)
        - y2 * h0 * h0 / (6.0 * h1 * h)
    )
    return first, full
