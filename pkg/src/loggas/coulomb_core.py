"""Exact and blob-regularized 2D Coulomb (logarithmic) kernel primitives.

Conventions used throughout the package::

    g(x)   = -(1/2pi) log|x|                 potential, -Laplace(g) = delta_0
    K(x)   = -grad g(x) = x / (2pi |x|^2)    force kernel
    g_e(x) = -(1/4pi) log(|x|^2 + e^2)       blob-regularized potential
    K_e(x) = x / (2pi (|x|^2 + e^2))         its negative gradient

All functions accept a single 2-vector or a stack of shape ``(..., 2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi
FOUR_PI = 4.0 * np.pi


class KernelDomainError(ValueError):
    """Raised when the exact kernel is evaluated at a coincident pair."""


@dataclass(frozen=True)
class KernelSpec:
    """How pair interactions are evaluated.

    regularization_epsilon: blob width; 0 selects the exact kernel.
    diagonal_convention: if True, the exact potential is taken to be 0 at x = 0
        (used for lattice and Gibbs-type sums); forces never use it.
    """

    regularization_epsilon: float = 0.0
    diagonal_convention: bool = False

    def __post_init__(self):
        if not np.isfinite(self.regularization_epsilon) or self.regularization_epsilon < 0:
            raise ValueError("regularization_epsilon must be finite and >= 0")


def _as_points(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected trailing dimension 2, got shape {arr.shape}")
    return arr


def _squared_norm(arr: np.ndarray) -> np.ndarray:
    return arr[..., 0] ** 2 + arr[..., 1] ** 2


def green_log(x, diagonal_convention: bool = False):
    """Exact 2D Coulomb potential -(1/2pi) log|x|."""
    arr = _as_points(x)
    r2 = _squared_norm(arr)
    zero = r2 == 0.0
    if np.any(zero) and not diagonal_convention:
        raise KernelDomainError("green_log evaluated at x = 0 without diagonal convention")
    with np.errstate(divide="ignore"):
        out = -np.log(r2) / FOUR_PI
    out = np.where(zero, 0.0, out)
    return float(out) if out.ndim == 0 else out


def coulomb_force(x):
    """Exact force kernel K(x) = x / (2pi |x|^2); undefined at x = 0."""
    arr = _as_points(x)
    r2 = _squared_norm(arr)
    if np.any(r2 == 0.0):
        raise KernelDomainError("coulomb_force evaluated at x = 0")
    return arr / (TWO_PI * r2)[..., None]


def regularized_green(x, eps: float):
    """Blob potential -(1/4pi) log(|x|^2 + eps^2)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    arr = _as_points(x)
    out = -np.log(_squared_norm(arr) + eps * eps) / FOUR_PI
    return float(out) if out.ndim == 0 else out


def regularized_force(x, eps: float):
    """Blob force x / (2pi (|x|^2 + eps^2)), bounded by 1/(4pi eps)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    arr = _as_points(x)
    return arr / (TWO_PI * (_squared_norm(arr) + eps * eps))[..., None]


def kernel_potential(x, spec: KernelSpec):
    """Potential selected by ``spec`` (exact or regularized)."""
    if spec.regularization_epsilon > 0:
        return regularized_green(x, spec.regularization_epsilon)
    return green_log(x, spec.diagonal_convention)


def kernel_force(x, spec: KernelSpec):
    """Force selected by ``spec`` (exact or regularized)."""
    if spec.regularization_epsilon > 0:
        return regularized_force(x, spec.regularization_epsilon)
    return coulomb_force(x)


def pairwise_interaction_sum(points, spec: KernelSpec = KernelSpec()) -> float:
    """Return (1/2) sum_{i != j} g(x_i - x_j) for an (N, 2) point array.

    The sum runs over i < j in a fixed order on a lexicographically sorted copy
    of the points, so the result does not depend on the input ordering.
    """
    pts = _as_points(points)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need an (N, 2) array with N >= 2")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    n = pts.shape[0]
    eps = spec.regularization_epsilon
    total = 0.0
    # row blocks keep memory at O(N * block)
    block = max(1, 4_000_000 // n)
    for start in range(0, n - 1, block):
        stop = min(n - 1, start + block)
        rows = pts[start:stop]
        diff = rows[:, None, :] - pts[None, :, :]
        r2 = _squared_norm(diff)
        idx = np.arange(start, stop)[:, None]
        upper = np.arange(n)[None, :] > idx
        r2u = r2[upper]
        if eps > 0:
            vals = -np.log(r2u + eps * eps) / FOUR_PI
        else:
            if np.any(r2u == 0.0):
                raise KernelDomainError("coincident points with the exact kernel")
            vals = -np.log(r2u) / FOUR_PI
        total += float(np.sum(vals))
    return total
