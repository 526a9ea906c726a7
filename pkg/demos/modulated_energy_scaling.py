"""Modulated energy of i.i.d. samples shrinks like 1/N.

For samples drawn from rho, the diagonal-free energy F_N has mean exactly
-(1/N) int (g * rho) rho, so N * mean(F_N) should hover near that constant.
Run with ``python demos/modulated_energy_scaling.py``.
"""
import numpy as np

from loggas.chaos_functionals import PotentialInterpolant, modulated_energy_batch
from loggas.meanfield_pde import DensityField, gaussian_density
from loggas.particle_system import make_rng

field = DensityField.from_function(gaussian_density(1.0), 10.0, 256)
pot = PotentialInterpolant(field)
rng = make_rng(3)
print(f"target N * E[F_N] = {-pot.energy:.4f}")
for n in (16, 64, 256, 1024):
    reps = 200 if n <= 256 else 40
    cfg = rng.standard_normal((reps, n, 2))
    fn = modulated_energy_batch(cfg, pot)
    se = fn.std(ddof=1) / np.sqrt(reps)
    print(f"N = {n:5d}  mean F_N = {fn.mean():+.5f} +- {se:.5f}  N * mean = {n * fn.mean():+.4f}")
