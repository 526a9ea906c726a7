"""Mean-field drift-diffusion equation on a truncated square grid.

    d_t rho + div(rho u) = (1/beta) Laplace(rho),    u = K * rho = -grad(psi),  psi = g * rho

Grid: M x M cells on [-L, L]^2, values are point samples at cell centers,
indexed ``[i, j]`` with i along x. Mass is the midpoint sum ``sum(rho) h^2``.

The Poisson problem -Laplace(psi) = rho is solved with the fourth-order compact
9-point stencil by a sine transform, with Dirichlet data on a ghost ring taken
from a far-field multipole expansion of g * rho. Time stepping is Strang split:
exact Neumann diffusion in cosine space around an SSP-RK2 finite-volume
advection step with no-flux walls.
"""
from __future__ import annotations

import csv
from math import comb
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import fft

from . import _stencils

TWO_PI = 2.0 * np.pi


class GridResolutionError(ValueError):
    """Raised when the grid cannot represent the density (mass or boundary guard)."""


class CFLViolation(ValueError):
    """Raised when a requested step violates the advective stability limit."""


class WindowTooLargeError(RuntimeError):
    """Raised when Picard iterates fail to contract."""


def cell_centers(half_width: float, resolution: int) -> np.ndarray:
    h = 2.0 * half_width / resolution
    return -half_width + (np.arange(resolution) + 0.5) * h


@dataclass
class DensityField:
    half_width: float
    resolution: int
    values: np.ndarray
    time: float = 0.0
    beta: float = 1.0
    mass_tol: float = 1e-6

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        m = self.resolution
        if self.values.shape != (m, m):
            raise ValueError(f"values must have shape ({m}, {m})")
        if not self.half_width > 0 or m < 4:
            raise ValueError("need half_width > 0 and resolution >= 4")
        if not self.beta > 0 or self.time < 0:
            raise ValueError("need beta > 0 and time >= 0")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("density values must be finite and nonnegative")
        if abs(self.mass() - 1.0) > self.mass_tol:
            raise GridResolutionError(
                f"grid mass {self.mass():.10g} differs from 1 by more than {self.mass_tol:g}")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.resolution

    @property
    def centers(self) -> np.ndarray:
        return cell_centers(self.half_width, self.resolution)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.centers
        return np.meshgrid(c, c, indexing="ij")

    def mass(self) -> float:
        return float(self.values.sum() * self.h**2)

    def sup(self) -> float:
        return float(self.values.max())

    def lp_norm(self, p: float) -> float:
        if np.isinf(p):
            return self.sup()
        return float((np.sum(self.values**p) * self.h**2) ** (1.0 / p))

    def boundary_ratio(self) -> float:
        v = self.values
        edge = max(v[0].max(), v[-1].max(), v[:, 0].max(), v[:, -1].max())
        return float(edge / v.max())

    def with_values(self, values: np.ndarray, time: Optional[float] = None) -> "DensityField":
        return replace(self, values=values, time=self.time if time is None else time)

    @classmethod
    def from_function(cls, density: Callable[[np.ndarray, np.ndarray], np.ndarray],
                      half_width: float, resolution: int, beta: float = 1.0,
                      time: float = 0.0, normalize: bool = False, mass_tol: float = 1e-6,
                      boundary_tol: float = 1e-8) -> "DensityField":
        """Sample ``density(x, y)`` at cell centers and check the truncation guards."""
        c = cell_centers(half_width, resolution)
        x, y = np.meshgrid(c, c, indexing="ij")
        vals = np.asarray(density(x, y), dtype=float)
        if normalize:
            vals = vals / (vals.sum() * (2.0 * half_width / resolution) ** 2)
        out = cls(half_width, resolution, vals, time, beta, mass_tol)
        if out.boundary_ratio() > boundary_tol:
            raise GridResolutionError(
                f"boundary density ratio {out.boundary_ratio():.3g} exceeds {boundary_tol:g}; "
                "enlarge half_width")
        return out


@dataclass
class VectorField:
    half_width: float
    resolution: int
    x: np.ndarray
    y: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("vector components must be finite")

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x, self.y)


# -- analytic densities ---------------------------------------------------------

def gaussian_density(sigma2: float, mean=(0.0, 0.0)) -> Callable:
    """Isotropic 2D Gaussian with variance sigma2 per coordinate."""
    mx, my = mean

    def rho(x, y):
        return np.exp(-((x - mx) ** 2 + (y - my) ** 2) / (2 * sigma2)) / (TWO_PI * sigma2)

    return rho


def gaussian_mixture_density(weights: Sequence[float], means: Sequence, sigma2s: Sequence[float]
                             ) -> Callable:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    parts = [gaussian_density(s2, m) for s2, m in zip(sigma2s, means)]

    def rho(x, y):
        return sum(wk * p(x, y) for wk, p in zip(w, parts))

    return rho


def heat_baseline(sigma0: float, t: float, beta: float, half_width: float, resolution: int,
                  mean=(0.0, 0.0)) -> DensityField:
    """Gaussian of variance sigma0^2 + 2t/beta sampled on the grid (interaction-free solution)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    s2 = sigma0**2 + 2.0 * t / beta
    return DensityField.from_function(gaussian_density(s2, mean), half_width, resolution,
                                      beta=beta, time=t, mass_tol=np.inf, boundary_tol=np.inf)


# -- Poisson solve ------------------------------------------------------------

_MULTIPOLE_ORDER = 16


def _far_field_potential(values: np.ndarray, h: float, centers: np.ndarray,
                         zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
    """Multipole expansion of g * rho about the center of mass, evaluated at (zx, zy).

    Complex moments sum w (X + iY)^k are assembled from the separable real
    moments sum w X^a Y^b, computed as matrix products in coordinates scaled by
    the domain size.
    """
    p = _MULTIPOLE_ORDER
    wq = values * h * h
    m = wq.sum()
    scale = np.abs(centers).max()
    cx = float(centers @ wq.sum(axis=1)) / m
    cy = float(centers @ wq.sum(axis=0)) / m
    xp = ((centers - cx) / scale)[:, None] ** np.arange(p + 1)
    yp = ((centers - cy) / scale)[:, None] ** np.arange(p + 1)
    mom = xp.T @ wq @ yp
    z = (zx - cx + 1j * (zy - cy)) / scale
    acc = m * (np.log(np.abs(z)) + np.log(scale))
    zinv = 1.0 / z
    zk = np.ones_like(z)
    for k in range(1, p + 1):
        zk = zk * zinv
        ak = sum(comb(k, j) * (1j) ** j * mom[k - j, j] for j in range(k + 1))
        acc = acc - np.real(ak * zk) / k
    return -acc / TWO_PI


def _solve_potential(values: np.ndarray, half_width: float) -> np.ndarray:
    """psi on the (M+2)^2 grid including the Dirichlet ghost ring."""
    m = values.shape[0]
    h = 2.0 * half_width / m
    ext_c = -half_width + (np.arange(-1, m + 1) + 0.5) * h
    ext = np.zeros((m + 2, m + 2))
    ring = np.ones((m + 2, m + 2), dtype=bool)
    ring[1:-1, 1:-1] = False
    ex, ey = np.meshgrid(ext_c, ext_c, indexing="ij")
    ext[ring] = _far_field_potential(values, h, cell_centers(half_width, m), ex[ring], ey[ring])
    # compact 9-point operator: L9 = Laplace + (h^2/12) Laplace^2 + O(h^4)
    boundary = (4.0 * (ext[2:, 1:-1] + ext[:-2, 1:-1] + ext[1:-1, 2:] + ext[1:-1, :-2])
                + ext[2:, 2:] + ext[2:, :-2] + ext[:-2, 2:] + ext[:-2, :-2]) / (6.0 * h * h)
    rpad = np.pad(values, 1)
    lap_rho = (rpad[2:, 1:-1] + rpad[:-2, 1:-1] + rpad[1:-1, 2:] + rpad[1:-1, :-2]
               - 4.0 * values) / (h * h)
    rhs = values + (h * h / 12.0) * lap_rho + boundary
    cos_k = np.cos(np.pi * np.arange(1, m + 1) / (m + 1))
    cx, cy = np.meshgrid(cos_k, cos_k, indexing="ij")
    eig = (8.0 * (cx + cy) + 4.0 * cx * cy - 20.0) / (6.0 * h * h)
    interior = fft.idstn(fft.dstn(rhs, type=1) / (-eig), type=1)
    ext[1:-1, 1:-1] = interior
    return ext


@dataclass(frozen=True)
class PoissonSolution:
    potential: np.ndarray
    potential_ext: np.ndarray
    velocity: VectorField

    def face_velocities(self, h: float) -> tuple[np.ndarray, np.ndarray]:
        """Normal velocity -d(psi)/dn on the (M+1) x M and M x (M+1) cell faces."""
        p = self.potential_ext
        ux = -(p[1:, 1:-1] - p[:-1, 1:-1]) / h
        uy = -(p[1:-1, 1:] - p[1:-1, :-1]) / h
        return ux, uy


def poisson_solution(field: DensityField) -> PoissonSolution:
    ext = _solve_potential(field.values, field.half_width)
    h = field.h
    ux = -(ext[2:, 1:-1] - ext[:-2, 1:-1]) / (2 * h)
    uy = -(ext[1:-1, 2:] - ext[1:-1, :-2]) / (2 * h)
    vel = VectorField(field.half_width, field.resolution, ux, uy, field.time)
    return PoissonSolution(ext[1:-1, 1:-1].copy(), ext, vel)


def poisson_velocity(field: DensityField) -> tuple[np.ndarray, VectorField]:
    """Return (psi, u) with psi = g * rho and u = -grad(psi) = K * rho."""
    sol = poisson_solution(field)
    return sol.potential, sol.velocity


# -- time stepping ---------------------------------------------------------------

def _heat_multiplier(resolution: int, h: float, tau: float) -> np.ndarray:
    k = np.arange(resolution)
    lam = -(4.0 / h**2) * np.sin(np.pi * k / (2 * resolution)) ** 2
    return np.exp(tau * (lam[:, None] + lam[None, :]))


def heat_propagate(values: np.ndarray, h: float, diffusivity: float, tau: float) -> np.ndarray:
    """Exact solution operator of the Neumann 5-point heat equation over time tau."""
    if tau == 0:
        return values.copy()
    mult = _heat_multiplier(values.shape[0], h, diffusivity * tau)
    out = fft.idctn(fft.dctn(values, type=2, norm="ortho") * mult, type=2, norm="ortho")
    # transform round-off can leave -1e-20 sized values in the far tail
    return np.maximum(out, 0.0)


def _flux_divergence(values: np.ndarray, ux: np.ndarray, uy: np.ndarray, h: float,
                     scheme: str) -> np.ndarray:
    """-div(rho u) with zero normal flux on the walls."""
    m = values.shape[0]
    fx = np.zeros((m + 1, m))
    fy = np.zeros((m, m + 1))
    uxi = ux[1:-1]
    uyi = uy[:, 1:-1]
    if scheme == "upwind":
        fx[1:-1] = np.maximum(uxi, 0) * values[:-1] + np.minimum(uxi, 0) * values[1:]
        fy[:, 1:-1] = np.maximum(uyi, 0) * values[:, :-1] + np.minimum(uyi, 0) * values[:, 1:]
    elif scheme == "central":
        fx[1:-1] = uxi * 0.5 * (values[:-1] + values[1:])
        fy[:, 1:-1] = uyi * 0.5 * (values[:, :-1] + values[:, 1:])
    else:
        raise ValueError("advection must be 'upwind' or 'central'")
    return -((fx[1:] - fx[:-1]) + (fy[:, 1:] - fy[:, :-1])) / h


def _check_cfl(ux: np.ndarray, uy: np.ndarray, dt: float, h: float, cfl: float, t: float):
    umax = max(np.abs(ux[1:-1]).max(initial=0.0), np.abs(uy[:, 1:-1]).max(initial=0.0))
    # upwind forward Euler stays positive when the total outflow per cell is below 1
    out = (np.maximum(ux[1:], 0) + np.maximum(-ux[:-1], 0)
           + np.maximum(uy[:, 1:], 0) + np.maximum(-uy[:, :-1], 0))
    courant = umax * dt / h
    outflow = out.max() * dt / h
    if courant > cfl or outflow > 1.0:
        raise CFLViolation(
            f"t={t:g}: Courant number {courant:.3g} (limit {cfl}), outflow number "
            f"{outflow:.3g} (limit 1); reduce dt below {dt * min(cfl / max(courant, 1e-300), 1.0 / max(outflow, 1e-300)):.3g}")


def _advect(values: np.ndarray, half_width: float, dt: float, scheme: str, cfl: float,
            t: float, velocity: Optional[tuple] = None) -> np.ndarray:
    h = 2.0 * half_width / values.shape[0]

    def rate(v):
        if velocity is not None:
            ux, uy = velocity
        else:
            ext = _solve_potential(v, half_width)
            ux = -(ext[1:, 1:-1] - ext[:-1, 1:-1]) / h
            uy = -(ext[1:-1, 1:] - ext[1:-1, :-1]) / h
        _check_cfl(ux, uy, dt, h, cfl, t)
        return _flux_divergence(v, ux, uy, h, scheme)

    stage = values + dt * rate(values)
    if scheme == "upwind":
        stage = np.maximum(stage, 0.0)
    stage2 = stage + dt * rate(stage)
    out = 0.5 * (values + stage2)
    if scheme == "upwind":
        out = np.maximum(out, 0.0)
    return out


def step_density(field: DensityField, dt: float, *, interaction: bool = True,
                 advection: str = "upwind", cfl: float = 0.5) -> DensityField:
    """One Strang step: half diffusion, SSP-RK2 advection, half diffusion.

    interaction=False zeroes the velocity (pure heat flow). advection="central"
    swaps upwind fluxes for centered ones (second order, positivity not guaranteed).
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    d = 1.0 / field.beta
    h = field.h
    v = heat_propagate(field.values, h, d, 0.5 * dt)
    if interaction:
        v = _advect(v, field.half_width, dt, advection, cfl, field.time)
    v = heat_propagate(v, h, d, 0.5 * dt)
    if advection == "central":
        v = np.maximum(v, 0.0)
    return field.with_values(v, field.time + dt)


@dataclass
class Frame:
    """A saved state with its neighbours one step before and after (for time derivatives)."""
    field: DensityField
    prev: Optional[DensityField] = None
    next: Optional[DensityField] = None
    dt: float = 0.0


def run_trajectory(field: DensityField, dt: float, save_times: Sequence[float],
                   keep_neighbours: bool = False, **step_kwargs) -> list[Frame]:
    """Step to each time in ``save_times`` (rounded to the step grid) and save frames."""
    steps = sorted({int(round(t / dt)) for t in save_times})
    if steps and steps[0] < 1 and keep_neighbours:
        raise ValueError("neighbours need save times >= dt")
    frames: list[Frame] = []
    cur = field
    k = 0
    prev = None
    for target in steps:
        while k < target:
            prev, cur = cur, step_density(cur, dt, **step_kwargs)
            k += 1
        fr = Frame(cur, prev if keep_neighbours else None, None, dt)
        if keep_neighbours:
            fr.next = step_density(cur, dt, **step_kwargs)
        frames.append(fr)
    return frames


# -- mild formulation -----------------------------------------------------------

@dataclass
class PicardResult:
    iterates: list                  # DensityField at the horizon, one per iteration
    sup_differences: list           # sup over (s, x) of |rho^{k+1} - rho^k|
    ratios: list                    # successive difference ratios


def picard_mild_iterate(rho0: DensityField, horizon: float, iterations: int,
                        n_substeps: int = 64, safety: float = 1.0) -> PicardResult:
    """Iterate rho^{k+1}(s) = H(s) rho0 - int_0^s H(s - r) div(rho^k u^k)(r) dr.

    H is the exact discrete heat semigroup; the time integral uses the trapezoid
    rule on ``n_substeps`` intervals, with the same centered flux divergence as the
    ``central`` advection scheme.
    """
    if iterations < 0 or n_substeps < 1:
        raise ValueError("iterations >= 0 and n_substeps >= 1 required")
    if horizon > safety * rho0.beta / rho0.sup():
        raise WindowTooLargeError(
            f"horizon {horizon:g} exceeds safety * beta / sup(rho0) = "
            f"{safety * rho0.beta / rho0.sup():.4g}")
    d = 1.0 / rho0.beta
    h = rho0.h
    ds = horizon / n_substeps
    heat_path = [rho0.values.copy()]
    for _ in range(n_substeps):
        heat_path.append(heat_propagate(heat_path[-1], h, d, ds))
    path = heat_path
    iterates = [rho0.with_values(path[-1], rho0.time + horizon)]
    diffs, ratios = [], []

    def source(v):
        ext = _solve_potential(v, rho0.half_width)
        ux = -(ext[1:, 1:-1] - ext[:-1, 1:-1]) / h
        uy = -(ext[1:-1, 1:] - ext[1:-1, :-1]) / h
        return _flux_divergence(v, ux, uy, h, "central")

    for _ in range(iterations):
        f = [source(v) for v in path]
        integral = np.zeros_like(rho0.values)
        new = [heat_path[0]]
        for j in range(n_substeps):
            integral = (heat_propagate_signed(integral + 0.5 * ds * f[j], h, d, ds)
                        + 0.5 * ds * f[j + 1])
            new.append(heat_path[j + 1] + integral)
        diff = max(float(np.abs(a - b).max()) for a, b in zip(new, path))
        if diffs:
            ratios.append(diff / diffs[-1] if diffs[-1] > 0 else 0.0)
            if ratios[-1] >= 1.0:
                raise WindowTooLargeError(
                    f"Picard differences grew (ratio {ratios[-1]:.3g}); shorten the horizon")
        diffs.append(diff)
        path = new
        vals = np.maximum(path[-1], 0.0)
        iterates.append(rho0.with_values(vals, rho0.time + horizon))
    return PicardResult(iterates, diffs, ratios)


def heat_propagate_signed(values: np.ndarray, h: float, diffusivity: float, tau: float
                          ) -> np.ndarray:
    """As heat_propagate but without the positivity clamp (for signed data)."""
    mult = _heat_multiplier(values.shape[0], h, diffusivity * tau)
    return fft.idctn(fft.dctn(values, type=2, norm="ortho") * mult, type=2, norm="ortho")


# -- log derivatives ---------------------------------------------------------------

def log_derivative_fields(field: DensityField, floor: Optional[float] = None
                          ) -> tuple[VectorField, np.ndarray, np.ndarray]:
    """Centered differences of log(max(rho, floor)).

    Returns (grad log rho, Hessian stack [xx, xy, yy], mask). The mask keeps cells
    whose whole 3x3 stencil has rho >= floor; the floor defaults to 1e-10 sup(rho).
    """
    if floor is None:
        floor = 1e-10 * field.sup()
    if not floor > 0:
        raise ValueError("floor must be > 0")
    v = field.values
    lg = np.log(np.maximum(v, floor))
    gx, gy = _stencils.grad(lg, field.h)
    hxx, hxy, hyy = _stencils.hessian(lg, field.h)
    ok = v >= floor
    mask = np.zeros_like(ok)
    mask[1:-1, 1:-1] = ok[1:-1, 1:-1]
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            mask[1:-1, 1:-1] &= ok[1 + di:v.shape[0] - 1 + di, 1 + dj:v.shape[1] - 1 + dj]
    if not mask.any():
        raise ValueError("log-derivative mask is empty; lower the floor")
    zero = ~mask
    for a in (gx, gy, hxx, hxy, hyy):
        a[zero] = 0.0
    grad_field = VectorField(field.half_width, field.resolution, gx, gy, field.time)
    return grad_field, np.stack([hxx, hxy, hyy]), mask


# -- I/O ---------------------------------------------------------------------------
# Field checkpoint layout (little-endian):
#   8s   magic  b"LGFIELD\x00"
#   u32  version (=1)
#   f64  half_width L
#   u64  resolution M
#   f64  time
#   f64  beta
#   M*M f64 values, row-major over [i, j] (i along x)

FIELD_MAGIC = b"LGFIELD\x00"
FIELD_VERSION = 1
_FIELD_HEADER = struct.Struct("<8sIdQdd")


def save_field(path, field: DensityField) -> None:
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, field.half_width,
                                field.resolution, field.time, field.beta)
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def load_field(path, mass_tol: float = 1e-6) -> DensityField:
    data = Path(path).read_bytes()
    magic, version, half_width, m, time, beta = _FIELD_HEADER.unpack_from(data, 0)
    if magic != FIELD_MAGIC or version != FIELD_VERSION:
        raise ValueError("not a field checkpoint of a supported version")
    vals = np.frombuffer(data, dtype="<f8", count=m * m, offset=_FIELD_HEADER.size)
    return DensityField(half_width, m, vals.reshape(m, m).astype(float), time, beta, mass_tol)


def write_slice_csv(path, field: DensityField, axis: str = "x") -> None:
    """Values along the line through the grid center, parallel to ``axis``."""
    c = field.centers
    mid = field.resolution // 2
    line = field.values[:, mid] if axis == "x" else field.values[mid, :]
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "rho"])
        for a, b in zip(c, line):
            w.writerow([repr(float(a)), repr(float(b))])


def radial_profile(field: DensityField, n_bins: int = 64) -> tuple[np.ndarray, np.ndarray]:
    x, y = field.mesh()
    r = np.hypot(x, y).ravel()
    edges = np.linspace(0.0, field.half_width, n_bins + 1)
    idx = np.digitize(r, edges) - 1
    keep = (idx >= 0) & (idx < n_bins)
    sums = np.bincount(idx[keep], weights=field.values.ravel()[keep], minlength=n_bins)
    counts = np.bincount(idx[keep], minlength=n_bins)
    with np.errstate(invalid="ignore"):
        prof = sums / counts
    return 0.5 * (edges[1:] + edges[:-1]), prof


def write_radial_profile_csv(path, field: DensityField, n_bins: int = 64) -> None:
    r, prof = radial_profile(field, n_bins)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "rho_mean"])
        for a, b in zip(r, prof):
            w.writerow([repr(float(a)), repr(float(b))])
