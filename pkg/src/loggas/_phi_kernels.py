"""numba loops for the tabulated test function phi(x, y) on a grid."""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_TWO_PI = 2.0 * np.pi


@njit(cache=True, inline="always")
def _phi(i1, j1, i2, j2, c, wx, wy, a, b, diag):
    if i1 == i2 and j1 == j2:
        return diag[i1, j1] - 2.0 * a[i1, j1] + b
    dx = c[i1] - c[i2]
    dy = c[j1] - c[j2]
    r2 = dx * dx + dy * dy
    comm = ((wx[i1, j1] - wx[i2, j2]) * dx + (wy[i1, j1] - wy[i2, j2]) * dy) / (_TWO_PI * r2)
    return comm - a[i1, j1] - a[i2, j2] + b


@njit(cache=True, parallel=True)
def row_integrals(xi, xj, c, wx, wy, a, b, diag, rho, h):
    """sum_y phi(x, y) rho(y) h^2 for each sample cell x = (xi[k], xj[k])."""
    m = c.shape[0]
    out = np.zeros(xi.shape[0])
    for k in prange(xi.shape[0]):
        s = 0.0
        for i2 in range(m):
            for j2 in range(m):
                s += _phi(xi[k], xj[k], i2, j2, c, wx, wy, a, b, diag) * rho[i2, j2]
        out[k] = s * h * h
    return out


@njit(cache=True, parallel=True)
def column_integrals(yi, yj, c, wx, wy, a, b, diag, rho, h):
    """sum_x phi(x, y) rho(x) h^2 for each sample cell y."""
    m = c.shape[0]
    out = np.zeros(yi.shape[0])
    for k in prange(yi.shape[0]):
        s = 0.0
        for i1 in range(m):
            for j1 in range(m):
                s += _phi(i1, j1, yi[k], yj[k], c, wx, wy, a, b, diag) * rho[i1, j1]
        out[k] = s * h * h
    return out


@njit(cache=True, parallel=True)
def sup_over_y(xi, xj, yi, yj, c, wx, wy, a, b, diag):
    """max over the y sample set of |phi(x, y)| for each x sample."""
    out = np.zeros(xi.shape[0])
    for k in prange(xi.shape[0]):
        best = 0.0
        for l in range(yi.shape[0]):
            v = abs(_phi(xi[k], xj[k], yi[l], yj[l], c, wx, wy, a, b, diag))
            if v > best:
                best = v
        out[k] = best
    return out


@njit(cache=True)
def pair_sum(px, py, wx, wy, ax, divw):
    """(1/N^2) sum_{i, j} phi(x_i, x_j) for particles with interpolated w, A, div w.

    B is added by the caller; the diagonal uses the cell-average value div w / 4pi.
    """
    n = px.shape[0]
    s = 0.0
    for i in range(n):
        s += divw[i] / (2.0 * _TWO_PI) - 2.0 * ax[i]
        for j in range(i + 1, n):
            dx = px[i] - px[j]
            dy = py[i] - py[j]
            r2 = dx * dx + dy * dy
            comm = ((wx[i] - wx[j]) * dx + (wy[i] - wy[j]) * dy) / (_TWO_PI * r2)
            s += 2.0 * (comm - ax[i] - ax[j])
    return s / (n * n)
