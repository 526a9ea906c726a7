"""Numerical checks of the decay, Gaussian, log-derivative, LSI and large-deviation estimates.

Every check returns an :class:`EstimateReport`. One-sided bounds pass iff every
observed value is at most ``bound * (1 + tolerance)``. Checks that assert only
that a fitted constant stays bounded in time use :func:`bounded_in_time`: no
significant upward Kendall-tau trend at 5%, plus max/min below 10 where a ratio
limit applies (Gaussian-bound constants and the phi envelope ratio).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import optimize, signal, stats
from scipy.interpolate import RegularGridInterpolator

from . import _phi_kernels, _stencils
from .chaos_functionals import PotentialInterpolant, modulated_energy_batch
from .meanfield_pde import (DensityField, Frame, log_derivative_fields, poisson_solution,
                            poisson_velocity)
from .records import DiagnosticsRecord

ESTIMATE_IDS = ("carlen_loss", "velocity_interp", "asymptotic_decay", "gaussian_bounds",
                "log_gradient", "log_hessian", "gross_lsi", "phi_bound",
                "exponential_integrability", "LGE1", "LGE2", "LHE1", "LHE2", "LHE3")
EQUALITY_IDENTITIES = ("LGE2", "LHE3")
INEQUALITY_IDENTITIES = ("LGE1", "LHE1", "LHE2")
DEFAULT_WINDOW = (0.1, 10.0)

_TWO_PI = 2.0 * math.pi
_FOUR_PI = 4.0 * math.pi


class InsufficientDataError(ValueError):
    """Raised when a trajectory, mask or frame set is too small for a check."""


@dataclass
class EstimateReport:
    estimate_id: str
    times: list
    observed: list
    bound: list
    fitted_constants: dict
    passed: bool
    tolerance: float
    window: Optional[tuple] = None
    extra: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.estimate_id not in ESTIMATE_IDS:
            raise ValueError(f"unknown estimate_id {self.estimate_id!r}")
        if not len(self.times) == len(self.observed) == len(self.bound):
            raise ValueError("times, observed and bound must have equal length")

    def to_json_dict(self) -> dict:
        return {
            "estimate_id": self.estimate_id,
            "window": list(self.window) if self.window is not None else None,
            "fitted_constants": {k: _num(v) for k, v in self.fitted_constants.items()},
            "pass": bool(self.passed),
            "tolerance": _num(self.tolerance),
            "per_time": [{"t": _num(t), "observed": _num(o), "bound": _num(b)}
                         for t, o, b in zip(self.times, self.observed, self.bound)],
            "extra": _jsonable(self.extra),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["estimate_id", "t", "observed", "bound", "pass"])
            for t, o, b in zip(self.times, self.observed, self.bound):
                wr.writerow([self.estimate_id, repr(float(t)), repr(float(o)), repr(float(b)),
                             int(self.passed)])


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def one_sided_pass(observed, bound, tolerance: float) -> bool:
    o = np.asarray(observed, dtype=float)
    b = np.asarray(bound, dtype=float)
    return bool(np.all(o <= b * (1.0 + tolerance)))


@dataclass(frozen=True)
class TrendVerdict:
    bounded: bool
    kendall_tau: float
    p_value: float
    ratio: float


def bounded_in_time(times, values, ratio_limit: Optional[float] = 10.0, alpha: float = 0.05
                    ) -> TrendVerdict:
    """No significant upward trend (one-sided Kendall tau) and max/min < ratio_limit.

    ratio_limit=None applies the trend test alone; the ratio is still reported.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 3:
        raise InsufficientDataError("need at least three sampled times")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        return TrendVerdict(False, float("nan"), 0.0, float("inf"))
    res = stats.kendalltau(t, v, alternative="greater")
    tau = float(res.statistic) if np.isfinite(res.statistic) else 0.0
    p = float(res.pvalue) if np.isfinite(res.pvalue) else 1.0
    ratio = float(v.max() / v.min())
    ok = p >= alpha and (ratio_limit is None or ratio < ratio_limit)
    return TrendVerdict(ok, tau, p, ratio)


def _trend_report(estimate_id, times, observed, window, tolerance, constants, extra,
                  ratio_limit=10.0):
    """Report for a bounded-in-time constant; the per-time bound is ratio_limit * min."""
    verdict = bounded_in_time(times, observed, ratio_limit)
    floor = float(np.min(observed)) if ratio_limit is not None else math.inf
    extra = dict(extra)
    extra.update(kendall_tau=verdict.kendall_tau, trend_p_value=verdict.p_value,
                 max_min_ratio=verdict.ratio)
    return EstimateReport(estimate_id, [float(t) for t in times], [float(o) for o in observed],
                          [(ratio_limit or 1.0) * floor] * len(times), constants, verdict.bounded,
                          tolerance, window, extra)


def _in_window(trajectory: Sequence[DensityField], window) -> list:
    lo, hi = window
    return [f for f in trajectory if lo - 1e-12 <= f.time <= hi + 1e-12]


def _fields(trajectory) -> list:
    return [fr.field if isinstance(fr, Frame) else fr for fr in trajectory]


# -- decay estimates -----------------------------------------------------------------

def carlen_loss_constant(q: float) -> float:
    """K(q) = q'^(1/q') / q^(1/q), with K(1) = K(inf) = 1."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if q == 1 or math.isinf(q):
        return 1.0
    qp = q / (q - 1.0)
    return qp ** (1.0 / qp) / q ** (1.0 / q)


def carlen_loss_bound(norm_p0: float, t: float, p: float, q: float, beta: float) -> float:
    inv_p = 0.0 if math.isinf(p) else 1.0 / p
    inv_q = 0.0 if math.isinf(q) else 1.0 / q
    gap = inv_p - inv_q
    if gap == 0.0:
        return norm_p0
    ratio = carlen_loss_constant(q) / carlen_loss_constant(p)
    return ratio * (4.0 * math.pi * t / (beta * gap)) ** (-gap) * norm_p0


def check_carlen_loss(trajectory, p: float = 1.0, q: float = math.inf,
                      beta: Optional[float] = None, tolerance: float = 1e-2) -> EstimateReport:
    """||rho_t||_q against the optimal L^p -> L^q smoothing bound from the t = 0 field."""
    if not (1 <= p <= q):
        raise ValueError("need 1 <= p <= q <= inf")
    fields = _fields(trajectory)
    initial = [f for f in fields if f.time == 0.0]
    if not initial:
        raise InsufficientDataError("trajectory has no t = 0 field")
    beta = initial[0].beta if beta is None else beta
    norm0 = initial[0].lp_norm(p)
    times, obs, bnd = [], [], []
    for f in fields:
        if f.time <= 0.0:
            continue
        times.append(f.time)
        obs.append(f.lp_norm(q))
        bnd.append(carlen_loss_bound(norm0, f.time, p, q, beta))
    if not times:
        raise InsufficientDataError("no sampled times t > 0")
    sat = [o / b for o, b in zip(obs, bnd)]
    return EstimateReport("carlen_loss", times, obs, bnd, {"max_saturation": max(sat)},
                          one_sided_pass(obs, bnd, tolerance), tolerance, None,
                          {"p": p, "q": q, "beta": beta, "saturation": sat,
                           "skipped": "t = 0 sample"})


def check_velocity_interp_bound(field: DensityField, tolerance: float = 1e-2,
                                velocity=None) -> EstimateReport:
    """max|u| against sqrt(||rho||_1 ||rho||_inf / (2 pi))."""
    if velocity is None:
        _, velocity = poisson_velocity(field)
    observed = float(velocity.magnitude().max())
    l1 = float(np.abs(field.values).sum() * field.h**2)
    bound = math.sqrt(l1 * field.sup() / _TWO_PI)
    return EstimateReport("velocity_interp", [field.time], [observed], [bound],
                          {"slack": bound / observed if observed > 0 else math.inf},
                          one_sided_pass([observed], [bound], tolerance), tolerance)


def _op_norm_sym(xx, xy, yy):
    """Spectral norm of the symmetric 2x2 field [[xx, xy], [xy, yy]]."""
    return np.abs(0.5 * (xx + yy)) + np.sqrt(0.25 * (xx - yy) ** 2 + xy**2)


def check_asymptotic_decay(trajectory, window=(0.0, 10.0), min_span: float = 5.0,
                           tolerance: float = 0.0) -> EstimateReport:
    """Boundedness of sup(rho)(1+t)/beta, sup|u| sqrt((1+t)/beta) and the derivative decays."""
    fields = _in_window(_fields(trajectory), window)
    if len(fields) < 3 or fields[-1].time - fields[0].time < min_span:
        raise InsufficientDataError(f"trajectory must span at least {min_span} time units")
    series = {"sup_rho": [], "sup_velocity": [], "sup_grad": [], "sup_hessian": []}
    for f in fields:
        t, b, h = f.time, f.beta, f.h
        _, vel = poisson_velocity(f)
        gx, gy = _stencils.grad(f.values, h)
        hxx, hxy, hyy = _stencils.hessian(f.values, h)
        series["sup_rho"].append(f.sup() * (1 + t) / b)
        series["sup_velocity"].append(float(vel.magnitude().max()) * math.sqrt((1 + t) / b))
        series["sup_grad"].append(float(np.nanmax(np.hypot(gx, gy))) * (1 + t) ** 1.5)
        series["sup_hessian"].append(float(np.nanmax(_op_norm_sym(hxx, hxy, hyy))) * (1 + t) ** 2)
    times = [f.time for f in fields]
    verdicts = {k: bounded_in_time(times, v, None) for k, v in series.items()}
    rep = _trend_report("asymptotic_decay", times, series["sup_rho"], tuple(window), tolerance,
                        {k: max(v) for k, v in series.items()},
                        {"series": series,
                         "bounded": {k: v.bounded for k, v in verdicts.items()},
                         "trend_p_values": {k: v.p_value for k, v in verdicts.items()}},
                        ratio_limit=None)
    rep.passed = all(v.bounded for v in verdicts.values())
    return rep


# -- Gaussian bounds -----------------------------------------------------------------

def _bulk(field: DensityField, floor_rel: float):
    x, y = field.mesh()
    mask = field.values >= floor_rel * field.sup()
    if mask.sum() < 9:
        raise InsufficientDataError("Gaussian-bound mask has fewer than 9 cells")
    return field.values[mask], (x**2 + y**2)[mask]


def fit_gaussian_upper_constant(field: DensityField, floor_rel: float = 1e-10) -> float:
    """Smallest C with rho <= C/(1+t) exp(-|x|^2/(8t + C)) on the mask."""
    rho, r2 = _bulk(field, floor_rel)
    t = field.time
    log_rho = np.log(rho) + math.log1p(t)

    def gap(log_c):
        c = math.exp(log_c)
        return float(np.max(log_rho + r2 / (8 * t + c))) - log_c

    lo, hi = -30.0, 5.0
    while gap(hi) > 0:
        hi += 5.0
    if gap(lo) <= 0:
        return math.exp(lo)
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-12))


def fit_gaussian_lower_constant(field: DensityField, floor_rel: float = 1e-10) -> float:
    """Smallest C >= 1 with rho >= exp(-C|x|^2/(1+t)) / (C (1+t)^C) on the mask."""
    rho, r2 = _bulk(field, floor_rel)
    t = field.time
    log_rho = np.log(rho)

    def gap(c):
        return float(np.min(log_rho + math.log(c) + c * math.log1p(t) + c * r2 / (1 + t)))

    if gap(1.0) >= 0:
        return 1.0
    hi = 2.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            return math.inf
    return optimize.brentq(gap, hi / 2 if gap(hi / 2) < 0 else 1.0, hi, xtol=1e-12)


def check_gaussian_bounds(trajectory, window=DEFAULT_WINDOW, floor_rel: float = 1e-10,
                          tolerance: float = 0.0) -> EstimateReport:
    """Fit C_up and C_low per time; pass iff both stay bounded across the window."""
    fields = _in_window(_fields(trajectory), window)
    times = [f.time for f in fields]
    c_up = [fit_gaussian_upper_constant(f, floor_rel) for f in fields]
    c_low = [fit_gaussian_lower_constant(f, floor_rel) for f in fields]
    v_up, v_low = bounded_in_time(times, c_up), bounded_in_time(times, c_low)
    rep = _trend_report("gaussian_bounds", times, c_up, tuple(window), tolerance,
                        {"C_up": max(c_up), "C_low": max(c_low)},
                        {"C_up": c_up, "C_low": c_low, "C_low_bounded": v_low.bounded,
                         "C_low_ratio": v_low.ratio, "C_up_bounded": v_up.bounded})
    rep.passed = v_up.bounded and v_low.bounded
    return rep


# -- log-derivative envelopes ----------------------------------------------------------

def log_envelope(t: float, r2, with_log: bool = True):
    """(1 + log(1+t) + |x|^2/(1+t)); the conjectured form drops log(1+t)."""
    return 1.0 + (math.log1p(t) if with_log else 0.0) + r2 / (1.0 + t)


def _log_quotients(field: DensityField, floor: Optional[float], which: str):
    grad, hess, mask = log_derivative_fields(field, floor)
    x, y = field.mesh()
    r2 = (x**2 + y**2)[mask]
    t = field.time
    if which == "gradient":
        mag = (grad.x**2 + grad.y**2)[mask]
    else:
        mag = _op_norm_sym(hess[0], hess[1], hess[2])[mask]
    proven = float(np.max(mag * (1 + t) / log_envelope(t, r2)))
    conj = float(np.max(mag * (1 + t) / log_envelope(t, r2, with_log=False)))
    return proven, conj, hess, mask


def _check_log(estimate_id, which, trajectory, window, floor, tolerance):
    fields = _in_window(_fields(trajectory), window)
    times, q, qc = [], [], []
    for f in fields:
        proven, conj, hess, mask = _log_quotients(f, floor, which)
        times.append(f.time)
        q.append(proven)
        qc.append(conj)
    return _trend_report(estimate_id, times, q, tuple(window), tolerance,
                         {"C": max(q), "C_conjectured": max(qc)},
                         {"Q_conjectured": qc}, ratio_limit=None)


def check_log_gradient(trajectory, window=DEFAULT_WINDOW, floor: Optional[float] = None,
                       tolerance: float = 0.0) -> EstimateReport:
    """Q(t) = max |grad log rho|^2 (1+t) / (1 + log(1+t) + |x|^2/(1+t)) over the mask."""
    return _check_log("log_gradient", "gradient", trajectory, window, floor, tolerance)


def check_log_hessian(trajectory, window=DEFAULT_WINDOW, floor: Optional[float] = None,
                      tolerance: float = 0.0) -> EstimateReport:
    """As check_log_gradient with the spectral norm of the Hessian of log rho."""
    return _check_log("log_hessian", "hessian", trajectory, window, floor, tolerance)


# -- logarithmic Sobolev ------------------------------------------------------------------

def _gradient4(f: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Fourth-order centered gradient, second order in the two outer rings."""
    gx, gy = np.gradient(f, h, edge_order=2)
    gx[2:-2] = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * h)
    gy[:, 2:-2] = (f[:, :-4] - 8 * f[:, 1:-3] + 8 * f[:, 3:-1] - f[:, 4:]) / (12 * h)
    return gx, gy


def gross_lsi_sides(f: np.ndarray, h: float, a: float) -> tuple[float, float]:
    """(entropy side, Dirichlet side) of the sharp LSI in d = 2 for grid samples f."""
    f = np.asarray(f, dtype=float)
    f2 = f * f
    norm2 = float(f2.sum() * h * h)
    gx, gy = _gradient4(f, h)
    pos = f2 > 0
    ent = float(np.sum(f2[pos] * np.log(f2[pos] / norm2)) * h * h)
    lhs = ent + (2.0 + math.log(a)) * norm2
    rhs = a / math.pi * float(np.sum(gx**2 + gy**2) * h * h)
    return lhs, rhs


def check_gross_lsi(test_functions: Sequence[Union[np.ndarray, Callable]], a: float,
                    half_width: float, resolution: Optional[int] = None,
                    tolerance: float = 1e-3) -> EstimateReport:
    """Check the LSI for each test function; callables are sampled on the cell grid."""
    if not a > 0:
        raise ValueError("a must be > 0")
    lhs_all, rhs_all, idx, skipped = [], [], [], []
    for k, f in enumerate(test_functions):
        if callable(f):
            if resolution is None:
                raise ValueError("resolution is required for callable test functions")
            h = 2.0 * half_width / resolution
            c = -half_width + (np.arange(resolution) + 0.5) * h
            x, y = np.meshgrid(c, c, indexing="ij")
            vals = np.asarray(f(x, y), dtype=float)
        else:
            vals = np.asarray(f, dtype=float)
            h = 2.0 * half_width / vals.shape[0]
        if not np.any(vals != 0):
            skipped.append(k)
            continue
        lhs, rhs = gross_lsi_sides(vals, h, a)
        lhs_all.append(lhs)
        rhs_all.append(rhs)
        idx.append(float(k))
    gaps = [r - l for l, r in zip(lhs_all, rhs_all)]
    return EstimateReport("gross_lsi", idx, lhs_all, rhs_all,
                          {"min_gap": min(gaps) if gaps else math.nan},
                          one_sided_pass(lhs_all, rhs_all, tolerance), tolerance, None,
                          {"a": a, "skipped": skipped})


# -- large-deviation test function ----------------------------------------------------------

def _kernel_tables(m: int, h: float):
    off = np.arange(-(m - 1), m) * h
    dx, dy = np.meshgrid(off, off, indexing="ij")
    r2 = dx**2 + dy**2
    r2[m - 1, m - 1] = 1.0
    kx, ky = dx / (_TWO_PI * r2), dy / (_TWO_PI * r2)
    kx[m - 1, m - 1] = ky[m - 1, m - 1] = 0.0
    return kx, ky


def _conv(src: np.ndarray, ker: np.ndarray) -> np.ndarray:
    """out[i] = sum_j ker[i - j] src[j] with ker indexed by offset + (M - 1)."""
    m = src.shape[0]
    return signal.fftconvolve(src, ker, mode="full")[m - 1:2 * m - 1, m - 1:2 * m - 1]


def _divergence(vx: np.ndarray, vy: np.ndarray, h: float) -> np.ndarray:
    return np.gradient(vx, h, axis=0) + np.gradient(vy, h, axis=1)


@dataclass
class TestFunctionPhi:
    """Double-centered commutator phi(x, y) tabulated on the field grid.

    phi = varphi(x, y) - A(x) - A(y) + B with varphi = (w(x) - w(y)) . K(x - y),
    A(x) = int varphi(x, y) rho(dy) and B = int A rho. On the diagonal cell varphi
    takes its cell average div w / (4 pi). ``w1`` and ``w2`` are the singular and
    regular parts of A with the self-cell corrections; c = int w2 rho.
    """
    __test__ = False

    field: DensityField
    beta: float
    w_x: np.ndarray
    w_y: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    c: float
    centering: np.ndarray
    double_centering: float
    diagonal: np.ndarray
    mask: np.ndarray
    weights: np.ndarray          # rho / mass, so that sum(weights) h^2 = 1

    @property
    def time(self) -> float:
        return self.field.time

    def _args(self):
        return (self.field.centers, self.w_x, self.w_y, self.centering,
                float(self.double_centering), self.diagonal)

    def evaluate(self, xi, xj, yi, yj) -> np.ndarray:
        """phi at grid cells (xi, xj) and (yi, yj); arrays broadcast together."""
        xi, xj, yi, yj = np.broadcast_arrays(*(np.asarray(a, dtype=np.int64)
                                               for a in (xi, xj, yi, yj)))
        c = self.field.centers
        dx, dy = c[xi] - c[yi], c[xj] - c[yj]
        r2 = dx**2 + dy**2
        same = r2 == 0
        r2 = np.where(same, 1.0, r2)
        comm = ((self.w_x[xi, xj] - self.w_x[yi, yj]) * dx
                + (self.w_y[xi, xj] - self.w_y[yi, yj]) * dy) / (_TWO_PI * r2)
        comm = np.where(same, self.diagonal[xi, xj], comm)
        return (comm - self.centering[xi, xj] - self.centering[yi, yj]
                + self.double_centering)

    def sample_cells(self, n_per_axis: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Masked cells on a strided sub-grid with about n_per_axis points per axis."""
        m = self.field.resolution
        stride = max(1, m // n_per_axis)
        idx = np.arange(stride // 2, m, stride)
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        keep = self.mask[ii, jj]
        return ii[keep].astype(np.int64), jj[keep].astype(np.int64)

    def cancellation_residuals(self, n_samples: int = 64, seed: int = 0
                               ) -> tuple[float, float]:
        """max |int phi(x, y) rho(dy)| over sampled x, and the same in the other argument."""
        ii, jj = np.nonzero(self.mask)
        rng = np.random.default_rng(seed)
        pick = rng.choice(ii.size, size=min(n_samples, ii.size), replace=False)
        si, sj = ii[pick].astype(np.int64), jj[pick].astype(np.int64)
        args = self._args()
        row = _phi_kernels.row_integrals(si, sj, *args, self.weights, self.field.h)
        col = _phi_kernels.column_integrals(si, sj, *args, self.weights, self.field.h)
        return float(np.abs(row).max()), float(np.abs(col).max())

    def sup_over_y(self, n_per_axis: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(xi, xj, sup_y |phi(x, y)|) with both arguments on the masked sub-grid."""
        xi, xj = self.sample_cells(n_per_axis)
        sup = _phi_kernels.sup_over_y(xi, xj, xi, xj, *self._args())
        return xi, xj, sup

    def interpolators(self):
        """Linear interpolants of (w_x, w_y, A, div w) for off-grid evaluation."""
        c = self.field.centers
        div = self.diagonal * _FOUR_PI
        return [RegularGridInterpolator((c, c), a, bounds_error=False, fill_value=0.0)
                for a in (self.w_x, self.w_y, self.centering, div)]


def build_test_function_phi(field: DensityField, beta: Optional[float] = None,
                            floor: Optional[float] = None, coverage: float = 0.999
                            ) -> TestFunctionPhi:
    """Tabulate w = grad log rho + beta grad(g * rho) and the centerings of varphi.

    Off-diagonal sums use a zero-padded FFT convolution with K(0) = 0; the self cell
    is handled by first-order Taylor expansion over the cell, which contributes
    -(h^2/4pi) grad rho to u, -(h^2/4pi) div(w rho) to w1 and div w / (4 pi) to the
    diagonal of varphi.
    """
    beta = field.beta if beta is None else beta
    if not (beta >= 0 and math.isfinite(beta)):
        raise ValueError("beta must be finite and >= 0")
    h = field.h
    m = field.resolution
    mass = field.mass()
    rho = field.values
    grad_log, _, mask = log_derivative_fields(field, floor)
    covered = float(rho[mask].sum() * h * h / mass)
    if covered < coverage:
        raise InsufficientDataError(
            f"log-derivative mask covers {covered:.6f} of the mass (< {coverage}); lower the floor")
    kx, ky = _kernel_tables(m, h)
    gr_x, gr_y = np.gradient(rho, h, edge_order=2)
    u_x = _conv(rho, kx) * h * h - h * h / _FOUR_PI * gr_x
    u_y = _conv(rho, ky) * h * h - h * h / _FOUR_PI * gr_y
    w_x = np.where(mask, grad_log.x - beta * u_x, 0.0)
    w_y = np.where(mask, grad_log.y - beta * u_y, 0.0)

    flux_x, flux_y = w_x * rho, w_y * rho
    w1 = (_conv(flux_x, kx) + _conv(flux_y, ky)) * h * h \
        - h * h / _FOUR_PI * _divergence(flux_x, flux_y, h)
    w2 = w_x * u_x + w_y * u_y
    c = float(np.sum(w2 * rho) * h * h)

    weights = rho / mass
    diag = _divergence(w_x, w_y, h) / _FOUR_PI
    cu_x, cu_y = _conv(weights, kx) * h * h, _conv(weights, ky) * h * h
    cw = (_conv(w_x * weights, kx) + _conv(w_y * weights, ky)) * h * h
    centering = w_x * cu_x + w_y * cu_y - cw + diag * weights * h * h
    double = float(np.sum(centering * weights) * h * h)
    if not (math.isfinite(c) and math.isfinite(double)):
        raise ArithmeticError("non-finite phi constants; refine the grid or raise the floor")
    return TestFunctionPhi(field, beta, w_x, w_y, w1, w2, c, centering, double, diag, mask,
                           weights)


def phi_envelope(t: float, r2):
    """(1 + log(1+t) + |x|^2/(1+t)) / (1+t)."""
    return log_envelope(t, r2) / (1.0 + t)


def _phi_ratio(phi: TestFunctionPhi, n_per_axis: int):
    xi, xj, sup = phi.sup_over_y(n_per_axis)
    c = phi.field.centers
    r2 = c[xi] ** 2 + c[xj] ** 2
    ratio = sup / phi_envelope(phi.time, r2)
    return float(ratio.max()), float(sup.max()), xi, xj, sup


def check_phi_bound(phi: Union[TestFunctionPhi, Sequence[TestFunctionPhi]],
                    t: Optional[float] = None, n_per_axis: int = 64,
                    tolerance: float = 0.0) -> EstimateReport:
    """R(t) = max_x sup_y |phi(x, y)| / envelope(t, x) on the sampled product grid.

    A single phi passes iff R is finite; a time series passes iff R(t) is bounded
    in time. The supremum over y is restricted to masked grid cells.
    """
    phis = [phi] if isinstance(phi, TestFunctionPhi) else list(phi)
    times, ratios, sups = [], [], []
    for p in phis:
        r, s, *_ = _phi_ratio(p, n_per_axis)
        times.append(p.time if t is None or len(phis) > 1 else t)
        ratios.append(r)
        sups.append(s)
    extra = {"sup_phi": sups}
    if len(phis) < 3:
        ok = all(math.isfinite(r) for r in ratios)
        return EstimateReport("phi_bound", times, ratios, [math.inf] * len(times),
                              {"C": max(ratios)}, ok, tolerance, None, extra)
    return _trend_report("phi_bound", times, ratios, (min(times), max(times)), tolerance,
                         {"C": max(ratios)}, extra)


_EXP_CAP = 700.0


def check_exponential_integrability(phi: TestFunctionPhi, field: Optional[DensityField] = None,
                                    t: Optional[float] = None, eps: float = 0.05,
                                    c_eta: float = 0.25, n_per_axis: int = 64,
                                    tail_limit: float = 0.05) -> EstimateReport:
    """I(lambda) = int exp(lambda sup_y |phi(x, y)|) rho(x) dx with lambda = eps (1 + t).

    The surrogate gamma = eta(t) I(lambda) / lambda with eta = c_eta eps (1+t)^(1-eps)
    bounds the large-deviation exponent for the test function eta phi; the
    largest admissible weight is lambda / I. "Finite" also requires that the
    outermost tenth of the sampled radii carries less than ``tail_limit`` of I.
    """
    field = phi.field if field is None else field
    t = field.time if t is None else t
    if not eps > 0:
        raise ValueError("eps must be > 0")
    lam = eps * (1.0 + t)
    xi, xj, sup = phi.sup_over_y(n_per_axis)
    w = field.values[xi, xj]
    w = w / w.sum()
    expo = lam * sup
    extra = {"eps": eps, "lambda": lam, "c_eta": c_eta}
    if expo.max() > _EXP_CAP:
        extra["largest_admissible_eps"] = _EXP_CAP / ((1.0 + t) * float(sup.max()))
        return EstimateReport("exponential_integrability", [t], [math.inf], [1.0],
                              {"I": math.inf}, False, 0.0, None, extra)
    contrib = np.exp(expo) * w
    integral = float(contrib.sum())
    c = field.centers
    r = np.hypot(c[xi], c[xj])
    tail = float(contrib[r >= np.quantile(r, 0.9)].sum() / integral)
    eta = c_eta * eps * (1.0 + t) ** (1.0 - eps)
    gamma = eta * integral / lam
    extra.update(I=integral, I_over_lambda=integral / lam, eta=eta,
                 admissible_eta=lam / integral, tail_fraction=tail)
    ok = math.isfinite(integral) and tail < tail_limit and gamma < 1.0
    return EstimateReport("exponential_integrability", [t], [gamma], [1.0],
                          {"I": integral, "gamma": gamma}, ok, 0.0, None, extra)


# -- appendix propagation identities ------------------------------------------------------

def chain_rule_residual(which: str, rho, rho_t, grad_rho, lap_rho, grad_f, reaction, diffusivity):
    """LGE2 / LHE3 residual from given derivative fields via the chain rule.

    For F = rho log rho or rho (log rho)^2 this equals F'(rho) times the residual
    rho_t - D lap rho - grad f . grad rho + reaction * rho of the evolution equation.
    """
    gx, gy = grad_rho
    fx, fy = grad_f
    lg = np.log(rho)
    g2 = gx**2 + gy**2
    if which == "LGE2":
        val, d1, d2 = rho * lg, 1.0 + lg, 1.0 / rho
        rhs = -diffusivity * g2 / rho - reaction * rho
    elif which == "LHE3":
        val, d1, d2 = rho * lg**2, lg**2 + 2.0 * lg, 2.0 * (lg + 1.0) / rho
        rhs = -2.0 * reaction * rho * lg - 2.0 * diffusivity * (1.0 + lg) * g2 / rho
    else:
        raise ValueError("chain-rule residual is defined for LGE2 and LHE3")
    lhs = (d1 * rho_t + reaction * val - diffusivity * (d1 * lap_rho + d2 * g2)
           - d1 * (fx * gx + fy * gy))
    return lhs - rhs


def _tensor3(t):
    """Full 2x2x2 array of a symmetric third-derivative tuple (xxx, xxy, xyy, yyy)."""
    xxx, xxy, xyy, yyy = t
    out = np.empty((2, 2, 2) + xxx.shape)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                n_y = i + j + k
                out[i, j, k] = (xxx, xxy, xyy, yyy)[n_y]
    return out


def _hess2(hxx, hxy, hyy):
    return np.array([[hxx, hxy], [hxy, hyy]])


@dataclass
class _FrameTerms:
    rho: np.ndarray
    p: np.ndarray          # grad rho, shape (2, M, M)
    hess: np.ndarray       # (2, 2, M, M)
    third: np.ndarray      # (2, 2, 2, M, M)


def _frame_terms(values, h) -> _FrameTerms:
    p = np.array(_stencils.grad(values, h))
    return _FrameTerms(values, p, _hess2(*_stencils.hessian(values, h)),
                       _tensor3(_stencils.third(values, h)))


def _quantity(which: str, ft: _FrameTerms) -> np.ndarray:
    rho = np.where(ft.rho > 0, ft.rho, np.nan)
    if which == "LGE2":
        return rho * np.log(rho)
    if which == "LHE3":
        return rho * np.log(rho) ** 2
    if which in ("LGE1", "LHE1"):
        return np.sum(ft.p**2, axis=0) / rho
    return np.sum(ft.hess**2, axis=(0, 1)) / rho


def _identity_mask(field: DensityField, floor_rel: float, ring: int = 4) -> np.ndarray:
    v = field.values
    ok = v >= floor_rel * field.sup()
    mask = np.zeros_like(ok)
    s = slice(ring, -ring)
    mask[s, s] = ok[s, s]
    for di in range(-2, 3):
        for dj in range(-2, 3):
            mask[s, s] &= np.roll(np.roll(ok, -di, 0), -dj, 1)[s, s]
    return mask


def identity_terms(frame: Frame, which: str, floor_rel: float = 1e-4) -> dict:
    """Pointwise operator value, exact right-hand side and upper bound on the mask.

    The operator is (d/dt + q - D lap - grad f . grad) applied to the quantity of the
    identity, with a centered time difference across the frame's neighbours, q = rho
    and f = g * rho of the middle frame.
    """
    if which not in EQUALITY_IDENTITIES + INEQUALITY_IDENTITIES:
        raise ValueError(f"unknown identity {which!r}")
    if frame.prev is None or frame.next is None or not frame.dt > 0:
        raise InsufficientDataError("identity residuals need frames with both neighbours")
    fld = frame.field
    h, t, dif = fld.h, fld.time, 1.0 / fld.beta
    mid = _frame_terms(fld.values, h)
    qty = [_quantity(which, _frame_terms(f.values, h)) for f in (frame.prev, fld, frame.next)]
    q_t = (qty[2] - qty[0]) / (2.0 * frame.dt)
    q_mid = qty[1]
    gq = np.array(_stencils.grad(q_mid, h))
    lap_q = _stencils.laplacian(q_mid, h)

    psi_ext = poisson_solution(fld).potential_ext
    fgrad = np.array(_stencils.grad(psi_ext, h))[:, 1:-1, 1:-1]
    fhess = _hess2(*_stencils.hessian(psi_ext, h))[:, :, 1:-1, 1:-1]
    fthird = _tensor3(_stencils.third(psi_ext, h))[..., 1:-1, 1:-1]

    rho = fld.values
    with np.errstate(invalid="ignore", divide="ignore"):
        op = q_t + rho * q_mid - dif * lap_q - np.sum(fgrad * gq, axis=0)
        p, hs = mid.p, mid.hess
        p2 = np.sum(p**2, axis=0)
        v = p2 / rho
        if which == "LGE2":
            exact = -dif * v - rho * rho
        elif which == "LHE3":
            exact = -2.0 * rho * rho * np.log(rho) - 2.0 * dif * (1.0 + np.log(rho)) * v
        elif which in ("LGE1", "LHE1"):
            mod = hs - p[:, None] * p[None, :] / rho
            pfp = np.einsum("i...,ij...,j...->...", p, fhess, p)
            exact = (-2.0 * dif / rho * np.sum(mod**2, axis=(0, 1)) - 2.0 * p2
                     + 2.0 / rho * pfp)
        else:
            mod3 = mid.third - p[:, None, None] * hs[None] / rho
            php = np.einsum("i...,ij...,j...->...", p, hs, p)
            hfp = np.einsum("ij...,ijk...,k...->...", hs, fthird, p)
            hfh = np.einsum("ij...,jk...,ki...->...", hs, fhess, hs)
            exact = (-2.0 * dif / rho * np.sum(mod3**2, axis=(0, 1, 2))
                     - 2.0 * np.sum(hs**2, axis=(0, 1)) - 4.0 / rho * php
                     + 2.0 / rho * hfp + 4.0 / rho * hfh)

    mask = _identity_mask(fld, floor_rel) & np.isfinite(op) & np.isfinite(exact)
    if mask.sum() < 9:
        raise InsufficientDataError("identity mask has fewer than 9 cells")
    out = {"operator": op, "exact": exact, "mask": mask, "time": t}
    if which in INEQUALITY_IDENTITIES:
        out.update(_inequality_bound(which, t, dif, rho, v, p2, hs, fhess, fthird, mask))
    return out


def _inequality_bound(which, t, dif, rho, v, p2, hs, fhess, fthird, mask) -> dict:
    with np.errstate(invalid="ignore", divide="ignore"):
        f_op = float(np.max(_op_norm_sym(fhess[0, 0], fhess[0, 1], fhess[1, 1])[mask]))
        c0 = 2.0 * (1.0 + t) * f_op
        consts = {"C": c0}
        if which == "LGE1":
            bound = c0 / (1.0 + t) * v
        elif which == "LHE1":
            bound = (-dif * np.sum(hs**2, axis=(0, 1)) / rho + 2.0 * dif * p2**2 / rho**3
                     + c0 / (1.0 + t) * v)
        else:
            f3 = float(np.max(np.sqrt(np.sum(fthird**2, axis=(0, 1, 2)))[mask]))
            h_op = float(np.max(_op_norm_sym(hs[0, 0], hs[0, 1], hs[1, 1])[mask]))
            c1 = (1.0 + t) * (4.0 * f_op + f3)
            c1p = (1.0 + t) ** 2 * (4.0 * h_op + f3)
            consts = {"C1": c1, "C1_prime": c1p}
            z = np.sum(hs**2, axis=(0, 1)) / rho
            bound = c1 / (1.0 + t) * z + c1p / (1.0 + t) ** 2 * v
    return {"bound": bound, "constants": consts}


def appendix_identity_residual(trajectory: Union[Frame, Sequence[Frame]], which: str,
                               floor_rel: float = 1e-4, tolerance: float = 0.05
                               ) -> EstimateReport:
    """Residuals of LGE2 / LHE3, or bound violations of LGE1 / LHE1 / LHE2, per frame.

    Equality identities report max |operator - exact| on the mask; ``pass`` means the
    residual is below ``tolerance`` times the operator scale (the convergence order
    is measured with :func:`identity_refinement_order`). Inequalities report
    max(operator - bound) and pass iff it does not exceed the finite-difference
    tolerance, taken as the max |operator - exact| of the same identity's exact form.
    """
    frames = [trajectory] if isinstance(trajectory, Frame) else list(trajectory)
    if not frames:
        raise InsufficientDataError("no frames")
    times, observed, bounds, scales, consts = [], [], [], [], {}
    for fr in frames:
        terms = identity_terms(fr, which, floor_rel)
        m = terms["mask"]
        op = terms["operator"][m]
        resid = float(np.max(np.abs(op - terms["exact"][m])))
        scale = float(np.max(np.abs(op)))
        times.append(terms["time"])
        scales.append(scale)
        if which in EQUALITY_IDENTITIES:
            observed.append(resid)
            bounds.append(tolerance * scale)
        else:
            observed.append(float(np.max(op - terms["bound"][m])))
            bounds.append(resid)
            for k, v in terms["constants"].items():
                consts[k] = max(consts.get(k, -math.inf), v)
    if which in EQUALITY_IDENTITIES:
        ok = all(o <= b for o, b in zip(observed, bounds))
    else:
        ok = all(o <= b for o, b in zip(observed, bounds))
    return EstimateReport(which, times, observed, bounds, consts, ok,
                          tolerance if which in EQUALITY_IDENTITIES else 0.0, None,
                          {"operator_scale": scales, "floor_rel": floor_rel})


def identity_refinement_order(coarse: EstimateReport, fine: EstimateReport,
                              refinement: float = 2.0) -> list:
    """Observed convergence orders log(r_coarse / r_fine) / log(refinement) per time."""
    return [math.log(a / b) / math.log(refinement) for a, b in zip(coarse.observed, fine.observed)]


# -- modulated energy along co-evolved ensembles -------------------------------------------------

def commutator_estimate(phi: TestFunctionPhi, configs: np.ndarray) -> tuple[float, float]:
    """(1/2) mean over configurations of (1/N^2) sum_{i, j} phi(x_i, x_j), with its std error.

    Off-grid values of w, A and div w are linearly interpolated.
    """
    cfg = np.asarray(configs, dtype=float)
    wx_i, wy_i, a_i, div_i = phi.interpolators()
    vals = np.empty(cfg.shape[0])
    for r, pts in enumerate(cfg):
        vals[r] = 0.5 * (_phi_kernels.pair_sum(pts[:, 0].copy(), pts[:, 1].copy(), wx_i(pts),
                                               wy_i(pts), a_i(pts), div_i(pts))
                         + phi.double_centering)
    err = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
    return float(vals.mean()), err


def modulated_energy_evolution(trajectory, ensembles, time_tol: float = 1e-9,
                               with_commutator: bool = True, config_hash: str = "",
                               code_version: str = "") -> list[DiagnosticsRecord]:
    """Per-time F_N ensemble statistics and the commutator Monte Carlo estimate.

    ``ensembles`` maps time -> configurations of shape (R, N, 2); every time must
    match a field of the trajectory within ``time_tol``.
    """
    fields = _fields(trajectory)
    items = sorted(ensembles.items()) if isinstance(ensembles, dict) else list(ensembles)
    records = []
    for t, cfg in items:
        match = [f for f in fields if abs(f.time - t) <= time_tol]
        if not match:
            raise InsufficientDataError(f"no field at t = {t}")
        f = match[0]
        cfg = np.asarray(cfg, dtype=float)
        fn = modulated_energy_batch(cfg, PotentialInterpolant(f))
        vals = {"F_N": float(fn.mean()), "F_N_std": float(fn.std(ddof=1)) if len(fn) > 1 else 0.0}
        errs = {"F_N": float(fn.std(ddof=1) / math.sqrt(len(fn))) if len(fn) > 1 else math.nan}
        if with_commutator:
            phi = build_test_function_phi(f)
            vals["commutator"], errs["commutator"] = commutator_estimate(phi, cfg)
        records.append(DiagnosticsRecord(float(t), vals, errs, int(cfg.shape[1]),
                                         config_hash, None, code_version))
    return records
