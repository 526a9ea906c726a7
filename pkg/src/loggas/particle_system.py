"""N-particle log-gas SDE: force engines, Euler-Maruyama stepping, i.i.d. sampling.

    dX^i = (1/N) sum_{j != i} K_e(X^i - X^j) dt + sqrt(2/beta) dW^i
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import _treecode
from .coulomb_core import KernelDomainError


class IntegrationError(RuntimeError):
    """Raised when a time step produces non-finite positions."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _clone_rng(rng: np.random.Generator) -> np.random.Generator:
    out = np.random.Generator(np.random.PCG64())
    out.bit_generator.state = rng.bit_generator.state
    return out


@dataclass
class ParticleState:
    positions: np.ndarray
    time: float = 0.0
    beta: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: make_rng(0))
    seed: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must have shape (N, 2)")
        if self.positions.shape[0] < 2:
            raise ValueError("need at least two particles")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.time < 0:
            raise ValueError("time must be >= 0")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_positions(cls, positions, beta: float = 1.0, seed: int = 0,
                       time: float = 0.0) -> "ParticleState":
        return cls(np.array(positions, dtype=float), time, beta, make_rng(seed), seed)


@dataclass(frozen=True)
class ForceAccuracy:
    """Force-engine selection.

    multipole_order counts far-field terms about each cell's center of mass:
    0 is the plain monopole (the dipole vanishes about the center of mass),
    higher orders add quadrupole and beyond. Accepted cells are shifted into a
    local series of degree multipole_order + 2 about each target leaf.
    """

    mode: str = "direct"
    opening_angle_theta: float = 0.5
    regularization_epsilon: float = 0.0
    multipole_order: int = 2
    leaf_size: int = 32

    def __post_init__(self):
        if self.mode not in ("direct", "tree"):
            raise ValueError("mode must be 'direct' or 'tree'")
        if self.mode == "tree" and not 0.0 < self.opening_angle_theta < 1.0:
            raise ValueError("tree mode needs 0 < theta < 1")
        if self.regularization_epsilon < 0:
            raise ValueError("regularization_epsilon must be >= 0")
        if self.multipole_order < 0 or self.leaf_size < 1:
            raise ValueError("multipole_order >= 0 and leaf_size >= 1 required")


def default_epsilon(n: int, c: float = 0.5) -> float:
    """Regularization width c * N^(-1/2) used for time stepping."""
    return c / np.sqrt(n)


def compute_forces_direct(state: ParticleState, eps: float = 0.0) -> np.ndarray:
    """(1/N) sum_{j != i} K_eps(x_i - x_j) by direct O(N^2) summation."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    out, bad = _treecode.direct_forces(state.positions, float(eps))
    if bad:
        raise KernelDomainError("coincident particles with eps = 0")
    return out


def compute_forces_tree(state: ParticleState, acc: ForceAccuracy) -> np.ndarray:
    """Barnes-Hut quadtree forces; exact kernel in the far field, K_eps near."""
    if acc.mode != "tree":
        raise ValueError("compute_forces_tree requires mode='tree'")
    pos = state.positions
    perm, cx, cy, hw, start, count, child = _treecode.build_tree(pos, acc.leaf_size)
    com, radius, moments = _treecode.node_moments(pos, perm, start, count,
                                                  acc.multipole_order + 1)
    out, bad = _treecode.tree_forces_grouped(pos, perm, hw, start, count, child, com,
                                             radius, moments, acc.opening_angle_theta,
                                             acc.regularization_epsilon,
                                             acc.multipole_order + 2)
    if bad:
        raise KernelDomainError("coincident particles with eps = 0")
    return out


def compute_forces(state: ParticleState, acc: ForceAccuracy) -> np.ndarray:
    if acc.mode == "tree":
        return compute_forces_tree(state, acc)
    return compute_forces_direct(state, acc.regularization_epsilon)


def step_euler_maruyama(state: ParticleState, dt: float, acc: ForceAccuracy,
                        external_drift: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                        noise: bool = True) -> ParticleState:
    """One Euler-Maruyama step; the input state (and its generator) is left untouched.

    external_drift, if given, maps positions to an extra (N, 2) drift such as -grad V.
    noise=False integrates the deterministic (beta -> infinity) dynamics.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    drift = compute_forces(state, acc)
    if external_drift is not None:
        drift = drift + external_drift(state.positions)
    rng = _clone_rng(state.rng)
    new = state.positions + drift * dt
    if noise:
        new = new + np.sqrt(2.0 * dt / state.beta) * rng.standard_normal(new.shape)
    if not np.all(np.isfinite(new)):
        raise IntegrationError(f"non-finite positions at t={state.time + dt:g}")
    return ParticleState(new, state.time + dt, state.beta, rng, state.seed)


def simulate(state: ParticleState, dt: float, n_steps: int, acc: ForceAccuracy,
             **kwargs) -> ParticleState:
    for _ in range(n_steps):
        state = step_euler_maruyama(state, dt, acc, **kwargs)
    return state


# -- samplers ---------------------------------------------------------------

def gaussian_sampler(sigma: float = 1.0, mean=(0.0, 0.0)) -> Callable:
    mean = np.asarray(mean, dtype=float)

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        return mean + sigma * rng.standard_normal((n, 2))

    draw.sigma = sigma
    draw.mean = mean
    return draw


def uniform_disk_sampler(radius: float = 1.0, center=(0.0, 0.0)) -> Callable:
    center = np.asarray(center, dtype=float)

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        r = radius * np.sqrt(rng.random(n))
        a = 2.0 * np.pi * rng.random(n)
        return center + np.column_stack([r * np.cos(a), r * np.sin(a)])

    return draw


def sample_iid(density_sampler: Callable, n: int, seed: int, beta: float = 1.0) -> ParticleState:
    """n i.i.d. draws from ``density_sampler(rng, n)``; the same generator then drives the SDE."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = make_rng(seed)
    pos = np.asarray(density_sampler(rng, n), dtype=float)
    return ParticleState(pos, 0.0, beta, rng, seed)


# -- checkpoint I/O -----------------------------------------------------------
# Layout (little-endian):
#   8s   magic  b"LGPART\x00\x00"
#   u32  version (=1)
#   u64  N
#   f64  beta
#   f64  time
#   u64  seed
#   f64  epsilon
#   N*2 f64 positions, row-major (x0, y0, x1, y1, ...)

CHECKPOINT_MAGIC = b"LGPART\x00\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQddQd")


def save_checkpoint(path, state: ParticleState, epsilon: float = 0.0) -> None:
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, state.n, state.beta,
                          state.time, state.seed, epsilon)
    with open(Path(path), "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(state.positions, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParticleState, float]:
    """Return (state, epsilon). The generator is re-seeded from the stored seed."""
    data = Path(path).read_bytes()
    magic, version, n, beta, time, seed, eps = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError("not a particle checkpoint of a supported version")
    pos = np.frombuffer(data, dtype="<f8", count=2 * n, offset=_HEADER.size).reshape(n, 2)
    return ParticleState(pos.astype(float), time, beta, make_rng(seed), seed), eps


def with_positions(state: ParticleState, positions: np.ndarray) -> ParticleState:
    return replace(state, positions=np.asarray(positions, dtype=float))
