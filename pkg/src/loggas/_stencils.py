"""Centered finite-difference stencils on uniform cell-centered grids.

Arrays are indexed ``[i, j]`` with i along x and j along y. Every stencil
returns an array of the input shape; the outer ``width`` ring of cells, where
the stencil would leave the grid, is filled with NaN.
"""
from __future__ import annotations

import numpy as np


def _blank(a: np.ndarray) -> np.ndarray:
    return np.full(a.shape, np.nan)


def grad(a: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    gx, gy = _blank(a), _blank(a)
    gx[1:-1, 1:-1] = (a[2:, 1:-1] - a[:-2, 1:-1]) / (2 * h)
    gy[1:-1, 1:-1] = (a[1:-1, 2:] - a[1:-1, :-2]) / (2 * h)
    return gx, gy


def hessian(a: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(xx, xy, yy) second derivatives."""
    hxx, hxy, hyy = _blank(a), _blank(a), _blank(a)
    c = a[1:-1, 1:-1]
    hxx[1:-1, 1:-1] = (a[2:, 1:-1] - 2 * c + a[:-2, 1:-1]) / h**2
    hyy[1:-1, 1:-1] = (a[1:-1, 2:] - 2 * c + a[1:-1, :-2]) / h**2
    hxy[1:-1, 1:-1] = (a[2:, 2:] - a[2:, :-2] - a[:-2, 2:] + a[:-2, :-2]) / (4 * h**2)
    return hxx, hxy, hyy


def laplacian(a: np.ndarray, h: float) -> np.ndarray:
    hxx, _, hyy = hessian(a, h)
    return hxx + hyy


def third(a: np.ndarray, h: float) -> tuple[np.ndarray, ...]:
    """(xxx, xxy, xyy, yyy) third derivatives; ring width 2."""
    out = [_blank(a) for _ in range(4)]
    s = slice(2, -2)

    def sh(di, dj):
        n0, n1 = a.shape
        return a[2 + di:n0 - 2 + di, 2 + dj:n1 - 2 + dj]

    out[0][s, s] = (sh(2, 0) - 2 * sh(1, 0) + 2 * sh(-1, 0) - sh(-2, 0)) / (2 * h**3)
    out[3][s, s] = (sh(0, 2) - 2 * sh(0, 1) + 2 * sh(0, -1) - sh(0, -2)) / (2 * h**3)
    # d_y of the xx second difference, and d_x of the yy one
    out[1][s, s] = ((sh(1, 1) - 2 * sh(0, 1) + sh(-1, 1))
                    - (sh(1, -1) - 2 * sh(0, -1) + sh(-1, -1))) / (2 * h**3)
    out[2][s, s] = ((sh(1, 1) - 2 * sh(1, 0) + sh(1, -1))
                    - (sh(-1, 1) - 2 * sh(-1, 0) + sh(-1, -1))) / (2 * h**3)
    return tuple(out)
