import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loggas.coulomb_core import (FOUR_PI, TWO_PI, KernelDomainError, KernelSpec, coulomb_force,
                                 green_log, kernel_force, kernel_potential,
                                 pairwise_interaction_sum, regularized_force, regularized_green)

coord = st.floats(-50, 50, allow_nan=False).filter(lambda v: abs(v) > 1e-3)


def test_green_log_values():
    assert green_log([1.0, 0.0]) == 0.0
    assert green_log([math.e, 0.0]) == pytest.approx(-1 / TWO_PI, rel=1e-14)
    assert green_log([0.0, 0.0], diagonal_convention=True) == 0.0
    with pytest.raises(KernelDomainError):
        green_log([0.0, 0.0])


def test_coulomb_force_values():
    np.testing.assert_allclose(coulomb_force([1.0, 0.0]), [1 / TWO_PI, 0.0], rtol=1e-15)
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(coulomb_force(-x), -coulomb_force(x), rtol=1e-15)
    with pytest.raises(KernelDomainError):
        coulomb_force([0.0, 0.0])


@given(coord, coord)
def test_force_homogeneity(a, b):
    x = np.array([a, b])
    assert np.linalg.norm(coulomb_force(x)) * np.linalg.norm(x) == pytest.approx(1 / TWO_PI,
                                                                                   rel=1e-12)


def test_regularized_green():
    assert regularized_green([0.0, 0.0], 1.0) == 0.0
    assert abs(regularized_green([1.0, 0.0], 1e-8)) < 1e-15
    x = [2.0, 0.0]
    assert regularized_green(x, 0.01) == pytest.approx(green_log(x), rel=1e-4)


def test_regularized_force_bound_and_far_field():
    eps = 0.1
    assert np.all(regularized_force([0.0, 0.0], eps) == 0.0)
    c = np.linspace(-1, 1, 401)
    pts = np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)
    assert np.linalg.norm(regularized_force(pts, eps), axis=-1).max() <= 1 / (4 * math.pi * eps)
    x = np.array([100 * eps, 0.0])
    np.testing.assert_allclose(regularized_force(x, eps), coulomb_force(x), rtol=1e-4)
    rel = np.linalg.norm(regularized_force(x, eps) - coulomb_force(x)) / np.linalg.norm(
        coulomb_force(x))
    assert rel == pytest.approx(eps**2 / (1e4 * eps**2 + eps**2), rel=1e-6)


def test_kernel_spec_dispatch():
    x = np.array([0.5, 0.2])
    assert kernel_potential(x, KernelSpec()) == green_log(x)
    assert kernel_potential(x, KernelSpec(0.1)) == regularized_green(x, 0.1)
    np.testing.assert_array_equal(kernel_force(x, KernelSpec(0.1)), regularized_force(x, 0.1))
    with pytest.raises(ValueError):
        KernelSpec(-1.0)


def test_pairwise_sum_small_configurations():
    assert pairwise_interaction_sum([[0, 0], [1, 0]]) == 0.0
    e = math.e
    tri = [[0, 0], [e, 0], [e / 2, e * math.sqrt(3) / 2]]
    assert pairwise_interaction_sum(tri) == pytest.approx(-3 / TWO_PI, rel=1e-13)
    with pytest.raises(KernelDomainError):
        pairwise_interaction_sum([[0, 0], [0, 0], [1, 1]])


def test_pairwise_sum_brute_force_oracle():
    pts = np.random.default_rng(3).normal(size=(16, 2))
    ref = 0.0
    for i in range(16):
        for j in range(16):
            if i != j:
                ref += -0.5 * math.log(math.dist(pts[i], pts[j])) / TWO_PI
    assert pairwise_interaction_sum(pts) == pytest.approx(ref, rel=1e-13)
    eps = 0.3
    ref_eps = sum(-math.log(math.dist(pts[i], pts[j]) ** 2 + eps**2) / FOUR_PI
                  for i in range(16) for j in range(i + 1, 16))
    assert pairwise_interaction_sum(pts, KernelSpec(eps)) == pytest.approx(ref_eps, rel=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pairwise_sum_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(12, 2))
    assert pairwise_interaction_sum(pts) == pairwise_interaction_sum(pts[rng.permutation(12)])
