import numpy as np
import pytest

from src.errors import GridTooCoarse
from src.geometry.spectral import (
    analyze,
    default_colat,
    evaluate_at,
    integrate,
    mode_index,
    n_modes,
    pole_rotation,
    quadrature_grid,
    rotate_coefficients,
    stretched_sampling,
    synthesize_fields,
    synthesize_values,
)

Y1 = np.sqrt(3.0 / (4.0 * np.pi))


def test_mode_index_layout():
    assert mode_index(0, 0) == 0
    assert [mode_index(1, m) for m in (-1, 0, 1)] == [1, 2, 3]
    assert mode_index(4, 4) == n_modes(4) - 1


def test_quadrature_weights_sum_to_sphere_area():
    grid = quadrature_grid(12)
    assert grid.weights.sum() == pytest.approx(4.0 * np.pi, rel=1e-14)
    assert grid.shape == (12, 24)


def test_basis_is_orthonormal():
    L = 6
    grid = quadrature_grid(default_colat(L))
    Y, _, _ = grid.basis(L)
    gram = (Y * grid.flat_weights) @ Y.T
    np.testing.assert_allclose(gram, np.eye(n_modes(L)), atol=1e-12)


def test_analyze_inverts_synthesis():
    L = 8
    rng = np.random.default_rng(3)
    coeffs = rng.normal(size=n_modes(L))
    grid = quadrature_grid(default_colat(L))
    values = synthesize_values(coeffs, L, grid)
    np.testing.assert_allclose(analyze(values, L, grid), coeffs, atol=1e-12)


def test_analyze_rejects_coarse_grid():
    grid = quadrature_grid(4)
    with pytest.raises(GridTooCoarse):
        analyze(np.zeros(grid.size), 4, grid)


def test_degree_one_modes_are_coordinates():
    grid = quadrature_grid(8)
    d = grid.directions
    for (m, axis) in ((1, 0), (-1, 1), (0, 2)):
        coeffs = np.zeros(n_modes(1))
        coeffs[mode_index(1, m)] = 1.0
        np.testing.assert_allclose(synthesize_values(coeffs, 1, grid).reshape(-1), Y1 * d[:, axis], atol=1e-14)


def test_theta_derivative_of_y10():
    grid = quadrature_grid(8)
    coeffs = np.zeros(n_modes(2))
    coeffs[mode_index(1, 0)] = 1.0
    fields = synthesize_fields(coeffs, 2, grid)
    theta = grid.theta[:, None]
    np.testing.assert_allclose(fields.d_theta, -Y1 * np.sin(theta) * np.ones(grid.shape), atol=1e-13)
    np.testing.assert_allclose(fields.d_theta_theta, -Y1 * np.cos(theta) * np.ones(grid.shape), atol=1e-13)
    np.testing.assert_allclose(fields.d_phi, 0.0, atol=1e-14)


def test_evaluate_at_matches_grid_synthesis():
    L = 5
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=n_modes(L))
    grid = quadrature_grid(10)
    np.testing.assert_allclose(
        evaluate_at(coeffs, L, grid.directions),
        synthesize_values(coeffs, L, grid).reshape(-1),
        atol=1e-12,
    )


def test_rotation_moves_z_mode_to_x_mode():
    coeffs = np.zeros(n_modes(2))
    coeffs[mode_index(1, 0)] = 1.0
    # e_z を e_x に移す回転
    R = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    rotated = rotate_coefficients(coeffs, 2, R)
    expected = np.zeros(n_modes(2))
    expected[mode_index(1, 1)] = 1.0
    np.testing.assert_allclose(rotated, expected, atol=1e-13)


def test_pole_rotation_maps_direction_to_north_pole():
    for d in ([1.0, 2.0, -0.5], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]):
        R = pole_rotation(np.array(d))
        np.testing.assert_allclose(R @ (np.array(d) / np.linalg.norm(d)), [0.0, 0.0, 1.0], atol=1e-14)


def test_stretched_sampling_integrates_polynomials():
    sampling = stretched_sampling(np.array([1.0, 0.0, 0.0]), 1e-3)
    d = sampling.directions
    assert integrate(np.ones(sampling.size), sampling) == pytest.approx(4.0 * np.pi, rel=1e-12)
    assert integrate(d[:, 0] ** 2, sampling) == pytest.approx(4.0 * np.pi / 3.0, rel=1e-12)
    # 最初のノードは極方向 (1,0,0) のすぐ近く
    assert np.max(d[:, 0]) > 1.0 - 1e-7


def test_stretched_sampling_rejects_bad_scale():
    with pytest.raises(ValueError):
        stretched_sampling(np.array([0.0, 0.0, 1.0]), 4.0)
