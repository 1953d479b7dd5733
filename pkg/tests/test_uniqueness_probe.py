import asyncio
import itertools

import numpy as np
import pytest

from src.experiments.uniqueness_probe import random_inits
from src.geometry.spectral import mode_index, n_modes
from src.geometry.surface_geometry import surface_distance
from src.solver.cmc_solver import SolveResult, SolverOptions, solve_many


def test_random_inits_sizes():
    H, R = 0.05, 40.0
    inits = random_inits(H, 8, 20, seed=0)
    offsets = np.array([np.linalg.norm(s.center) for s in inits])
    assert offsets.max() <= 0.3 * R + 1e-12
    # 一様な大きさなので最大は上限に近い
    assert offsets.max() > 0.15 * R
    start, stop = mode_index(2, -2), n_modes(4)
    for surface in inits:
        assert surface.mean_radius == pytest.approx(R, rel=0.1 + 1e-12)
        np.testing.assert_array_equal(surface.coeffs[1:start], 0.0)
        np.testing.assert_array_equal(surface.coeffs[stop:], 0.0)
        shape = np.linalg.norm(surface.coeffs[start:stop])
        assert shape == pytest.approx(0.05 * surface.coeffs[0], rel=1e-12)


def test_random_inits_are_seeded():
    a = random_inits(0.05, 4, 3, seed=7)
    b = random_inits(0.05, 4, 3, seed=7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.coeffs, y.coeffs)
        np.testing.assert_array_equal(x.center, y.center)


def test_random_inits_converge_to_one_surface(schwarzschild):
    inits = random_inits(0.05, 4, 4, seed=0)
    results = asyncio.run(solve_many(schwarzschild, 0.05, inits, SolverOptions(L_max=4), threads=2))
    assert all(isinstance(r, SolveResult) for r in results), results
    surfaces = [r.surface for r in results]
    spread = max(surface_distance(a, b) for a, b in itertools.combinations(surfaces, 2))
    assert spread < 1e-6
    np.testing.assert_allclose(surfaces[0].center, 0.0, atol=1e-6)
