"""Two particles pushed apart by the log kernel, then treecode against direct sums.

Run with ``python demos/two_body_and_treecode.py``.
"""
import numpy as np

from loggas.particle_system import (ForceAccuracy, ParticleState, compute_forces_direct,
                                    compute_forces_tree, gaussian_sampler, sample_iid, simulate)

# Two particles at unit distance, no noise. With drift (1/N) sum K the squared
# separation grows linearly: r^2 = 1 + t / pi.
state = ParticleState(np.array([[-0.5, 0.0], [0.5, 0.0]]))
acc = ForceAccuracy("direct")
dt = 1e-4
for t_end in (0.5, 1.0, 2.0):
    s = simulate(state, dt, int(round(t_end / dt)), acc, noise=False)
    r2 = float(np.sum((s.positions[0] - s.positions[1]) ** 2))
    print(f"t = {t_end:3.1f}  r^2 = {r2:.6f}  exact = {1 + t_end / np.pi:.6f}")

# Barnes-Hut forces for a Gaussian cloud; error relative to the largest direct force.
cloud = sample_iid(gaussian_sampler(1.0), 4096, seed=1)
direct = compute_forces_direct(cloud)
for theta in (0.7, 0.5, 0.3):
    tree = compute_forces_tree(cloud, ForceAccuracy("tree", theta))
    err = np.max(np.linalg.norm(tree - direct, axis=1)) / np.max(np.linalg.norm(direct, axis=1))
    print(f"theta = {theta:.1f}  max relative force error = {err:.2e}")
