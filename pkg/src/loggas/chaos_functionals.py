"""Modulated energy, entropy surrogates, Gibbs weights and confined equilibria.

    F_N(mu_N, rho) = (1/N^2) sum_{i != j} g(x_i - x_j) - (2/N) sum_i psi(x_i) + int psi rho,
    psi = g * rho.

The potential psi comes from the grid Poisson solve and is evaluated at the
particles with a bicubic interpolating spline over the grid plus its ghost ring.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.interpolate import RectBivariateSpline
from scipy.spatial import cKDTree

from .coulomb_core import FOUR_PI, TWO_PI, KernelDomainError, KernelSpec, pairwise_interaction_sum
from .meanfield_pde import (DensityField, _solve_potential, cell_centers, log_derivative_fields)
from .particle_system import ParticleState, make_rng

FUNCTIONAL_NAMES = ("F_N", "H_N_analytic", "KL_marginal", "E_N", "logG_N", "logG_rhobarN",
                    "fisher_analytic")


class ParticleOutsideGridError(ValueError):
    """Raised when a particle lies outside the field's square."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residuals: Sequence[float] = ()):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass(frozen=True)
class FunctionalValue:
    name: str
    value: float
    time: float = 0.0
    n_particles: int = 0
    error_estimate: float = 0.0

    def __post_init__(self):
        if self.name not in FUNCTIONAL_NAMES:
            raise ValueError(f"unknown functional {self.name!r}")


class PotentialInterpolant:
    """psi = g * rho for a field, with bicubic point evaluation and grid quadrature."""

    def __init__(self, field: DensityField, psi_ext: Optional[np.ndarray] = None):
        self.field = field
        self.psi_ext = _solve_potential(field.values, field.half_width) if psi_ext is None \
            else psi_ext
        m, h, L = field.resolution, field.h, field.half_width
        ext_c = -L + (np.arange(-1, m + 1) + 0.5) * h
        self._spline = RectBivariateSpline(ext_c, ext_c, self.psi_ext, kx=3, ky=3, s=0)
        self.psi = self.psi_ext[1:-1, 1:-1]
        self.energy = float(np.sum(self.psi * field.values) * h * h)   # int psi rho

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, 2)
        L = self.field.half_width
        if np.any(np.abs(flat) > L):
            raise ParticleOutsideGridError(
                f"{int(np.sum(np.any(np.abs(flat) > L, axis=1)))} point(s) outside [-{L}, {L}]^2")
        return self._spline.ev(flat[:, 0], flat[:, 1]).reshape(pts.shape[:-1])

    def extended(self, points: np.ndarray) -> np.ndarray:
        """As __call__, but points off the grid get the far-field value -(m/2pi) log|x|."""
        pts = np.asarray(points, dtype=float)
        flat = pts.reshape(-1, 2)
        out = np.empty(flat.shape[0])
        inside = np.all(np.abs(flat) <= self.field.half_width, axis=1)
        out[inside] = self._spline.ev(flat[inside, 0], flat[inside, 1])
        r = np.hypot(flat[~inside, 0], flat[~inside, 1])
        out[~inside] = -self.field.mass() * np.log(r) / TWO_PI
        return out.reshape(pts.shape[:-1])


def _interaction(points: np.ndarray) -> float:
    """(1/N^2) sum_{i != j} g(x_i - x_j)."""
    n = points.shape[0]
    return 2.0 * pairwise_interaction_sum(points, KernelSpec()) / n**2


def modulated_energy(particles: ParticleState, field: DensityField,
                     potential: Optional[PotentialInterpolant] = None) -> FunctionalValue:
    """F_N between the empirical measure of ``particles`` and ``field`` (diagonal excluded)."""
    pot = PotentialInterpolant(field) if potential is None else potential
    x = particles.positions
    n = particles.n
    val = _interaction(x) - 2.0 * float(np.sum(pot(x))) / n + pot.energy
    return FunctionalValue("F_N", val, field.time, n)


def modulated_energy_batch(configs: np.ndarray, potential: PotentialInterpolant) -> np.ndarray:
    """F_N for a stack of configurations of shape (R, N, 2)."""
    cfg = np.asarray(configs, dtype=float)
    r, n, _ = cfg.shape
    psi = potential(cfg)
    inter = np.empty(r)
    if n <= 64:
        iu = np.triu_indices(n, 1)
        # configurations in chunks of about 4e6 pair entries
        step = max(1, 4_000_000 // (n * n))
        for s in range(0, r, step):
            c = cfg[s:s + step]
            d2 = np.sum((c[:, :, None, :] - c[:, None, :, :]) ** 2, axis=-1)[:, iu[0], iu[1]]
            if np.any(d2 == 0.0):
                raise KernelDomainError("coincident particles with the exact kernel")
            inter[s:s + step] = -2.0 * np.sum(np.log(d2), axis=1) / FOUR_PI / n**2
    else:
        for k in range(r):
            inter[k] = 2.0 * pairwise_interaction_sum(cfg[k], KernelSpec()) / n**2
    return inter - 2.0 * psi.sum(axis=1) / n + potential.energy


def serfaty_lower_bound_margin(f_n: float, n: int, sup_density: float) -> float:
    """F_N + (1/4) log(n sup_density) / n, the margin against the d = 2 lower bound."""
    if n < 2 or not sup_density > 0:
        raise ValueError("need n >= 2 and sup_density > 0")
    return f_n + 0.25 * np.log(n * sup_density) / n


def calibrate_serfaty_constant(sampler, field: DensityField, n: int, n_configs: int,
                               seed: int = 0) -> float:
    """Smallest C >= 0 with margin >= -C/n over ``n_configs`` i.i.d. configurations."""
    pot = PotentialInterpolant(field)
    rng = make_rng(seed)
    cfg = np.stack([sampler(rng, n) for _ in range(n_configs)])
    fn = modulated_energy_batch(cfg, pot)
    margins = fn + 0.25 * np.log(n * field.sup()) / n
    return float(max(0.0, -margins.min() * n))


# -- analytic product densities ---------------------------------------------------

@dataclass(frozen=True)
class ProductGaussian:
    """i.i.d. factor N(mean, sigma2 I) of an analytic product law."""
    sigma2: float
    mean: tuple = (0.0, 0.0)

    def density(self, x, y):
        mx, my = self.mean
        return np.exp(-((x - mx) ** 2 + (y - my) ** 2) / (2 * self.sigma2)) / (TWO_PI * self.sigma2)

    def grad_log(self, x, y):
        mx, my = self.mean
        return -(x - mx) / self.sigma2, -(y - my) / self.sigma2


def _factor_on_grid(spec: ProductGaussian, field: DensityField, mass_tol: float):
    x, y = field.mesh()
    p = spec.density(x, y)
    mass = p.sum() * field.h**2
    if abs(mass - 1.0) > mass_tol:
        raise ValueError(f"factor mass on the grid is {mass:.8g}, not 1")
    return x, y, p


def relative_entropy_analytic(spec: ProductGaussian, field: DensityField,
                              mass_tol: float = 1e-6) -> FunctionalValue:
    """H_N for a product law: the one-particle KL(factor | field) by grid quadrature."""
    _, _, p = _factor_on_grid(spec, field, mass_tol)
    q = field.values
    pos = p > 0
    if np.any(q[pos] <= 0):
        return FunctionalValue("H_N_analytic", np.inf, field.time)
    val = float(np.sum(p[pos] * (np.log(p[pos]) - np.log(q[pos]))) * field.h**2)
    return FunctionalValue("H_N_analytic", max(val, 0.0) if val > -1e-14 else val, field.time)


def gaussian_kl(s1: float, s2: float, shift2: float = 0.0) -> float:
    """KL(N(m1, s1 I) | N(m2, s2 I)) in 2D with |m1 - m2|^2 = shift2."""
    return np.log(s2 / s1) + s1 / s2 - 1.0 + shift2 / (2.0 * s2)


def relative_fisher_analytic(spec: ProductGaussian, field: DensityField,
                             floor: Optional[float] = None, mass_tol: float = 1e-6,
                             coverage: float = 0.999) -> FunctionalValue:
    """int p |grad log p - grad log rho|^2 over the log-derivative mask."""
    x, y, p = _factor_on_grid(spec, field, mass_tol)
    grad, _, mask = log_derivative_fields(field, floor)
    covered = p[mask].sum() * field.h**2
    if covered < coverage:
        raise ValueError(f"mask covers only {covered:.6f} of the factor's mass")
    gx, gy = spec.grad_log(x, y)
    integrand = p * ((gx - grad.x) ** 2 + (gy - grad.y) ** 2)
    return FunctionalValue("fisher_analytic", float(integrand[mask].sum() * field.h**2),
                           field.time)


# -- sample-based marginal KL --------------------------------------------------------

def _kl_knn_core(pts: np.ndarray, log_q: np.ndarray, k: int) -> float:
    n = pts.shape[0]
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    eps = dist[:, k]
    entropy = special.digamma(n) - special.digamma(k) + np.log(np.pi) + 2.0 * np.mean(np.log(eps))
    return float(-np.mean(log_q) - entropy)


def marginal_kl_knn(samples: np.ndarray, field: DensityField, k: int = 5,
                    n_blocks: int = 20) -> FunctionalValue:
    """KL(first marginal | field) = cross-entropy minus Kozachenko-Leonenko entropy.

    The error estimate is a block jackknife; blocks are formed on the
    lexicographically sorted samples so the result does not depend on their order.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("samples must have shape (R, 2)")
    if not 3 <= k <= 20:
        raise ValueError("k must lie in [3, 20]")
    L = field.half_width
    inside = np.all(np.abs(pts) <= L, axis=1)
    if not inside.all():
        warnings.warn(f"{int((~inside).sum())} sample(s) outside the grid were excluded")
    pts = pts[inside]
    if pts.shape[0] < 100:
        raise ValueError("need at least 100 samples inside the grid")
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    c = cell_centers(L, field.resolution)
    floor = 1e-300
    spline = RectBivariateSpline(c, c, np.log(np.maximum(field.values, floor)), kx=1, ky=1, s=0)
    log_q = spline.ev(pts[:, 0], pts[:, 1])
    est = _kl_knn_core(pts, log_q, k)
    n = pts.shape[0]
    blocks = np.array_split(np.random.default_rng(0).permutation(n), n_blocks)
    leave = []
    for b in blocks:
        keep = np.ones(n, dtype=bool)
        keep[b] = False
        leave.append(_kl_knn_core(pts[keep], log_q[keep], k))
    leave = np.asarray(leave)
    err = float(np.sqrt((n_blocks - 1) / n_blocks * np.sum((leave - leave.mean()) ** 2)))
    return FunctionalValue("KL_marginal", est, field.time, 0, err)


# -- free energy and Gibbs weights ----------------------------------------------------

def modulated_free_energy(h: float, f: float, beta: float) -> float:
    """E_N = H + F / beta."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    return h + f / beta


def gibbs_weights(particles: ParticleState, field: DensityField, beta: float,
                  potential: Optional[PotentialInterpolant] = None) -> tuple[float, float]:
    """(log G_N, log G_rhobar_N) for one configuration.

    (1/N)(log G_rhobar_N - log G_N) = (beta/2) F_N, see ``gibbs_reassembly_residual``.
    """
    pot = PotentialInterpolant(field) if potential is None else potential
    n = particles.n
    x = particles.positions
    log_gn = -beta / n * pairwise_interaction_sum(x, KernelSpec())
    log_gr = -beta * float(np.sum(pot(x))) + 0.5 * beta * n * pot.energy
    return log_gn, log_gr


def gibbs_reassembly_residual(particles: ParticleState, field: DensityField, beta: float) -> float:
    """(1/N)(log G_rhobar_N - log G_N) - (beta/2) F_N; zero up to round-off."""
    pot = PotentialInterpolant(field)
    lg, lr = gibbs_weights(particles, field, beta, pot)
    fn = modulated_energy(particles, field, pot).value
    return (lr - lg) / particles.n - 0.5 * beta * fn


# -- confined equilibrium -----------------------------------------------------------

@dataclass(frozen=True)
class QuadraticConfinement:
    """V(x) = (strength / 2) |x|^2; added because the unconfined equilibrium is not normalizable."""
    strength: float = 1.0

    def __call__(self, x, y):
        return 0.5 * self.strength * (x * x + y * y)

    def drift(self, positions: np.ndarray) -> np.ndarray:
        return -self.strength * positions

    def describe(self) -> dict:
        return {"kind": "quadratic", "strength": self.strength}


@dataclass
class EquilibriumField:
    field: DensityField
    confinement: QuadraticConfinement
    partition: float
    beta: float
    residuals: list = dc_field(default_factory=list)

    def potential(self) -> PotentialInterpolant:
        return PotentialInterpolant(self.field)


def _gibbs_map(values, half_width, beta, vgrid, h):
    psi = _solve_potential(values, half_width)[1:-1, 1:-1]
    expo = -beta * (psi + vgrid)
    expo -= expo.max()
    w = np.exp(expo)
    z = w.sum() * h * h
    return w / z, z, expo


def solve_gibbs_equilibrium(beta: float, confinement: QuadraticConfinement, half_width: float,
                            resolution: int, damping: float = 0.5, tol: float = 1e-10,
                            max_iter: int = 2000) -> EquilibriumField:
    """Damped fixed point rho <- (1 - damping) rho + damping exp(-beta (g*rho + V)) / Z.

    beta = 0 returns the uniform density on the square.
    """
    if beta < 0 or not 0 < damping < 1:
        raise ValueError("need beta >= 0 and damping in (0, 1)")
    h = 2.0 * half_width / resolution
    c = cell_centers(half_width, resolution)
    x, y = np.meshgrid(c, c, indexing="ij")
    vgrid = confinement(x, y)
    if beta == 0:
        vals = np.full((resolution, resolution), 1.0 / (resolution * h) ** 2)
        fld = DensityField(half_width, resolution, vals, 0.0, np.inf)
        return EquilibriumField(fld, confinement, (resolution * h) ** 2, 0.0, [0.0])
    expo = -beta * vgrid
    rho = np.exp(expo - expo.max())
    rho /= rho.sum() * h * h
    history = []
    for _ in range(max_iter):
        target, _, _ = _gibbs_map(rho, half_width, beta, vgrid, h)
        res = float(np.abs(target - rho).max())
        history.append(res)
        if res < tol:
            break
        rho = (1.0 - damping) * rho + damping * target
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations "
                               f"(residual {history[-1]:.3g})", history)
    # report Z for the unshifted exponent
    psi = _solve_potential(rho, half_width)[1:-1, 1:-1]
    expo = -beta * (psi + vgrid)
    z = float(np.exp(expo).sum() * h * h)
    fld = DensityField(half_width, resolution, rho, 0.0, beta)
    return EquilibriumField(fld, confinement, z, beta, history)


def gibbs_fixed_point_residual(eq: EquilibriumField) -> float:
    f = eq.field
    if eq.beta == 0:
        return float(np.abs(f.values - f.values.mean()).max())
    x, y = f.mesh()
    target, _, _ = _gibbs_map(f.values, f.half_width, eq.beta, eq.confinement(x, y), f.h)
    return float(np.abs(target - f.values).max())


# -- symmetrized entropy identity ----------------------------------------------------

@dataclass
class GibbsIdentityResult:
    n: int
    beta: float
    rhs: float
    rhs_error: float
    lhs: Optional[float]
    lhs_error: Optional[float]
    envelope: float                  # (beta/8) log N / N
    n_samples: int
    stationarity_z: float


def sample_confined_gibbs(n: int, beta: float, confinement: QuadraticConfinement, n_chains: int,
                          dt: float, burn_in: float, n_snapshots: int, spacing: float,
                          seed: int, eps: float = 1e-3) -> np.ndarray:
    """Snapshots (n_snapshots * n_chains, n, 2) of independent confined SDE chains.

    The chains run the particle SDE with blob width ``eps`` plus the confinement
    drift, in one vectorized Euler-Maruyama loop.
    """
    rng = make_rng(seed)
    sd = 1.0 / np.sqrt(beta * confinement.strength)
    x = sd * rng.standard_normal((n_chains, n, 2))
    noise = np.sqrt(2.0 * dt / beta)

    def drift(x):
        d = x[:, :, None, :] - x[:, None, :, :]
        r2 = np.sum(d * d, axis=-1) + eps * eps
        f = np.sum(d / r2[..., None], axis=2) / (TWO_PI * n)
        return f + confinement.drift(x)

    def advance(x, t):
        for _ in range(int(round(t / dt))):
            x = x + drift(x) * dt + noise * rng.standard_normal(x.shape)
        return x

    x = advance(x, burn_in)
    out = []
    for _ in range(n_snapshots):
        x = advance(x, spacing)
        out.append(x.copy())
    if not np.all(np.isfinite(out[-1])):
        raise RuntimeError("confined chains produced non-finite positions")
    return np.concatenate(out, axis=0)


def _batch_means_error(values: np.ndarray, n_snap: int) -> float:
    """Standard error treating each snapshot's chain mean as one batch."""
    per = values.reshape(n_snap, -1)
    chains = per.mean(axis=0)
    return float(chains.std(ddof=1) / np.sqrt(chains.size))


def symmetrized_entropy_quadrature(eq: EquilibriumField, n_radial: int = 200,
                                   n_angle: int = 48, n_center: int = 40) -> tuple[float, float]:
    """Direct quadrature of (1/2) int (rho_2 - rhobar^2)(log rho_2 - log rhobar^2) for N = 2.

    rho_2 is the confined two-particle Gibbs density. In center/relative
    coordinates c = (x1 + x2)/2, r = x1 - x2 (unit Jacobian) it factorizes as
    exp(-beta k |c|^2) q(r) with q(r) = r^(beta/4pi) exp(-beta k |r|^2 / 4).
    The center integral uses Gauss-Hermite nodes for that Gaussian, the relative
    one Gauss-Legendre in |r| and the midpoint rule in angle. Returns
    (value, |value - value at half resolution|).
    """
    beta, k = eq.beta, eq.confinement.strength
    pot = eq.potential()
    log_z = np.log(eq.partition)

    def log_rhobar(px, py):
        pts = np.stack([px, py], axis=-1)
        return -beta * (pot.extended(pts) + eq.confinement(px, py)) - log_z

    def value(nr, na, nc):
        sc = 1.0 / np.sqrt(beta * k)
        gh_x, gh_w = np.polynomial.hermite.hermgauss(nc)
        cx, cy = np.meshgrid(gh_x * sc, gh_x * sc, indexing="ij")
        cx, cy = cx.ravel(), cy.ravel()
        # weights of the Gauss-Hermite rule for int F(c) exp(-|c|^2 / sc^2) dc
        cw = np.outer(gh_w, gh_w).ravel() * sc * sc
        gauss_c = -(cx**2 + cy**2) / sc**2
        rmax = np.sqrt(4.0 * 60.0 / (beta * k))
        gl_x, gl_w = np.polynomial.legendre.leggauss(nr)
        r = 0.5 * rmax * (gl_x + 1.0)
        rw = 0.5 * rmax * gl_w
        th = 2.0 * np.pi * (np.arange(na) + 0.5) / na
        log_q = beta / FOUR_PI * np.log(r) - beta * k * r * r / 4.0
        log_norm = np.log(2.0 * np.pi * np.sum(rw * r * np.exp(log_q))) + np.log(np.pi / (beta * k))
        total = 0.0
        for i in range(nr):
            hx = (0.5 * r[i] * np.cos(th))[None, :]
            hy = (0.5 * r[i] * np.sin(th))[None, :]
            lb = (log_rhobar(cx[:, None] + hx, cy[:, None] + hy)
                  + log_rhobar(cx[:, None] - hx, cy[:, None] - hy))
            l2 = (log_q[i] - log_norm + gauss_c)[:, None] * np.ones_like(lb)
            # integrand divided by the Gauss-Hermite weight function
            f = (np.exp(l2 - gauss_c[:, None]) - np.exp(lb - gauss_c[:, None])) * (l2 - lb)
            total += rw[i] * r[i] * (2.0 * np.pi / na) * np.sum(cw[:, None] * f)
        return 0.5 * total

    v1 = value(n_radial, n_angle, n_center)
    v2 = value(n_radial // 2, n_angle // 2, n_center // 2)
    return float(v1), float(abs(v1 - v2))


def gibbs_symmetrized_identity(samples: np.ndarray, eq: EquilibriumField, n_snapshots: int,
                               stationarity_z: float = 0.0, with_lhs: bool = True
                               ) -> GibbsIdentityResult:
    """rhs = -(beta/2) E[F_N] - (beta/2N) int psi rho by Monte Carlo over ``samples``.

    lhs is the symmetrized relative entropy by quadrature (N = 2 only).
    """
    cfg = np.asarray(samples, dtype=float)
    n = cfg.shape[1]
    beta = eq.beta
    pot = eq.potential()
    fn = modulated_energy_batch(cfg, pot)
    rhs = -0.5 * beta * fn.mean() - 0.5 * beta / n * pot.energy
    err = 0.5 * beta * _batch_means_error(fn, n_snapshots)
    lhs = lhs_err = None
    if with_lhs:
        if n != 2:
            raise NotImplementedError("the quadrature path supports N = 2 only")
        lhs, lhs_err = symmetrized_entropy_quadrature(eq)
    env = beta / 8.0 * np.log(n) / n
    return GibbsIdentityResult(n, beta, float(rhs), err, lhs, lhs_err, float(env), cfg.shape[0],
                               stationarity_z)


def stationarity_z_score(samples: np.ndarray, n_snapshots: int) -> float:
    """z-score of the mean |x|^2 between the first and second half of the snapshots."""
    r2 = np.sum(np.asarray(samples) ** 2, axis=(1, 2)).reshape(n_snapshots, -1)
    half = n_snapshots // 2
    a, b = r2[:half].mean(axis=0), r2[half:].mean(axis=0)
    d = a - b
    return float(abs(d.mean()) / (d.std(ddof=1) / np.sqrt(d.size)))


# -- diagnostics output ---------------------------------------------------------------

DIAGNOSTIC_COLUMNS = ("time", "N", "F_N", "KL_marginal", "E_N", "logG_N", "logG_rhobarN",
                      "F_N_err", "KL_marginal_err", "E_N_err")


def write_diagnostics_csv(path, rows: Sequence[dict]) -> str:
    """Write rows with DIAGNOSTIC_COLUMNS; returns the SHA-256 of the file bytes."""
    p = Path(path)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in DIAGNOSTIC_COLUMNS])
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_manifest(path, entries: dict, config_hash: str, seeds: Sequence[int],
                   extra: Optional[dict] = None) -> None:
    doc = {"config_hash": config_hash, "seeds": list(map(int, seeds)), "files": entries}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
