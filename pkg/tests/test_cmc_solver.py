import asyncio

import numpy as np
import pytest

from src.errors import LabError, LeftValidityRegion, NotMeanZero
from src.geometry.metric_models import MetricModel
from src.geometry.spectral import analyze, mode_index, n_modes, synthesize_values
from src.geometry.surface_geometry import RadialSurface, compute_frame
from src.solver.cmc_solver import (
    JacobianMode,
    SolverOptions,
    continue_foliation,
    jacobi_apply,
    jacobi_matrices,
    mean_curvature_residual,
    solve_cmc,
    solve_cmc_with_stats,
    solve_many,
    stability_inequality_check,
    stability_spectrum,
)


def _bumpy_sphere(radius: float, L_max: int, amplitude: float = 0.05) -> RadialSurface:
    surface = RadialSurface.sphere(radius, L_max=L_max)
    coeffs = np.array(surface.coeffs)
    coeffs[mode_index(2, 0)] = amplitude
    coeffs[mode_index(2, -2)] = -0.5 * amplitude
    coeffs[mode_index(3, 1)] = 0.3 * amplitude
    return surface.with_coeffs(coeffs)


def test_flat_solve_returns_round_sphere(flat):
    opts = SolverOptions(tol_residual=1e-13, L_max=8)
    result = solve_cmc_with_stats(flat, 0.2, _bumpy_sphere(9.5, 8), opts)
    exact = RadialSurface.sphere(10.0, L_max=8).coeffs
    assert np.abs(result.surface.coeffs - exact).max() < 1e-10
    assert result.iterations <= 6
    assert result.residual <= 1e-13
    # 平坦空間では中心を動かさない
    np.testing.assert_array_equal(result.surface.center, np.zeros(3))


def test_schwarzschild_solve_finds_coordinate_sphere(schwarzschild, sphere_mean_curvature):
    H = sphere_mean_curvature(1.0, 20.0)
    surface = solve_cmc(schwarzschild, H, RadialSurface.sphere(18.0), SolverOptions(L_max=6))
    assert surface.mean_radius == pytest.approx(20.0, abs=1e-6)
    np.testing.assert_allclose(surface.center, 0.0, atol=1e-6)


def test_translated_schwarzschild_solve_follows_the_core(schwarzschild, sphere_mean_curvature):
    model = schwarzschild.translated((2.0, 0.0, 0.0))
    H = sphere_mean_curvature(1.0, 20.0)
    surface = solve_cmc(model, H, RadialSurface.sphere(20.0), SolverOptions(L_max=6))
    np.testing.assert_allclose(surface.center, [2.0, 0.0, 0.0], atol=1e-6)
    assert surface.mean_radius == pytest.approx(20.0, abs=1e-6)


def test_finite_difference_jacobian_agrees(schwarzschild, sphere_mean_curvature):
    H = sphere_mean_curvature(1.0, 20.0)
    init = _bumpy_sphere(19.0, 4)
    analytic = solve_cmc(schwarzschild, H, init, SolverOptions(L_max=4))
    fd = solve_cmc(schwarzschild, H, init, SolverOptions(L_max=4, jacobian_mode=JacobianMode.FINITE_DIFFERENCE))
    np.testing.assert_allclose(fd.coeffs, analytic.coeffs, atol=1e-6)
    np.testing.assert_allclose(fd.center, analytic.center, atol=1e-6)


def test_perturbed_solve_converges(perturbed, sphere_mean_curvature):
    opts = SolverOptions(L_max=8)
    result = solve_cmc_with_stats(perturbed, sphere_mean_curvature(1.0, 30.0), RadialSurface.sphere(30.0), opts)
    assert result.residual <= opts.tol_residual
    assert np.abs(mean_curvature_residual(result.surface, perturbed, sphere_mean_curvature(1.0, 30.0))).max() < 1e-8
    # 四重極成分で球面からずれる
    assert np.abs(result.surface.coeffs[4:]).max() > 1e-6
    assert result.lowest_eigenvalue is not None and result.lowest_eigenvalue > 0


def test_solve_rejects_non_positive_target(flat):
    with pytest.raises(ValueError):
        solve_cmc(flat, 0.0, RadialSurface.sphere(1.0))


def test_initial_surface_inside_core(schwarzschild):
    with pytest.raises(LeftValidityRegion):
        solve_cmc(schwarzschild, 0.5, RadialSurface.sphere(0.3), SolverOptions(L_max=4))


@pytest.mark.parametrize(
    "kwargs",
    [{"tol_residual": 0.0}, {"L_max": 1}, {"damping": 1.5}, {"damping": 0.0}, {"max_newton_iters": 0}],
)
def test_invalid_solver_options(kwargs):
    with pytest.raises(ValueError):
        SolverOptions(**kwargs)


def test_flat_sphere_spectrum(flat):
    report = stability_spectrum(RadialSurface.sphere(10.0, L_max=4), flat, k=4)
    np.testing.assert_allclose(report.eigenvalues[:3], 0.0, atol=1e-12)
    assert report.eigenvalues[3] == pytest.approx(0.04, rel=1e-10)


def test_schwarzschild_sphere_is_strictly_stable(schwarzschild):
    surface = RadialSurface.sphere(20.0, L_max=4)
    assert stability_spectrum(surface, schwarzschild, k=1).lowest > 0.0
    assert stability_inequality_check(surface, schwarzschild, n_tests=20) > 0.0
    assert stability_inequality_check(surface, MetricModel.flat(), n_tests=20) >= -1e-12


def test_jacobi_apply_on_flat_sphere(flat):
    surface = RadialSurface.sphere(10.0, L_max=4)
    f = np.zeros(n_modes(4))
    f[mode_index(2, 1)] = 1.0
    np.testing.assert_allclose(jacobi_apply(surface, flat, f), 0.04 * f, atol=1e-13)

    constant = np.zeros(n_modes(4))
    constant[0] = 1.0
    with pytest.raises(NotMeanZero):
        jacobi_apply(surface, flat, constant)
    np.testing.assert_allclose(jacobi_apply(surface, flat, constant, project=True), 0.0, atol=1e-14)


def test_solve_many_reports_failures_in_place(schwarzschild, sphere_mean_curvature):
    H = sphere_mean_curvature(1.0, 20.0)
    inits = [RadialSurface.sphere(19.0), RadialSurface.sphere(0.3), RadialSurface.sphere(21.0)]
    results = asyncio.run(solve_many(schwarzschild, H, inits, SolverOptions(L_max=4), threads=2))
    assert len(results) == 3
    assert isinstance(results[1], LabError)
    for result in (results[0], results[2]):
        assert result.surface.mean_radius == pytest.approx(20.0, abs=1e-6)


def test_foliation_of_schwarzschild(schwarzschild, sphere_mean_curvature):
    H_list = [sphere_mean_curvature(1.0, r) for r in (10.0, 20.0, 40.0)]
    record = continue_foliation(schwarzschild, H_list, SolverOptions(L_max=4))
    assert record.complete
    frame = record.to_frame()
    assert list(frame.columns) == ["H", "r0", "r1", "cx", "cy", "cz", "lambda1", "iters", "residual"]
    np.testing.assert_allclose(frame["r0"], [10.0, 20.0, 40.0], rtol=1e-6)
    np.testing.assert_allclose(frame["r1"], [10.0, 20.0, 40.0], rtol=1e-6)
    assert (frame["lambda1"] > 0).all()
    # 遠方ほど安定性の余裕は小さい
    assert frame["lambda1"].is_monotonic_decreasing


def test_foliation_requires_decreasing_targets(flat):
    with pytest.raises(ValueError):
        continue_foliation(flat, [0.1, 0.2])


def test_foliation_records_failure(schwarzschild):
    # 小さすぎる葉は核に入る
    record = continue_foliation(schwarzschild, [0.5, 0.4], SolverOptions(L_max=4), init=RadialSurface.sphere(0.3))
    assert not record.complete
    assert record.entries == []
    assert "H=0.5" in record.failure


def test_residual_of_exact_sphere(flat):
    surface = RadialSurface.sphere(4.0, L_max=2)
    frame = compute_frame(surface, SolverOptions(L_max=2).grid)
    np.testing.assert_allclose(mean_curvature_residual(surface, flat, 0.5), 0.0, atol=1e-14)
    assert frame.H_e[0] == pytest.approx(0.5)


def _perturbed_leaf(perturbed, sphere_mean_curvature, L: int = 8):
    opts = SolverOptions(L_max=L)
    leaf = solve_cmc(perturbed, sphere_mean_curvature(1.0, 30.0), RadialSurface.sphere(30.0), opts)
    return leaf, opts


def _mean_zero(coeffs: np.ndarray, mean: np.ndarray) -> np.ndarray:
    coeffs = np.array(coeffs)
    coeffs[0] -= (mean @ coeffs) / mean[0]
    return coeffs


def test_jacobi_apply_matches_linearized_mean_curvature(perturbed, sphere_mean_curvature):
    L = 8
    leaf, opts = _perturbed_leaf(perturbed, sphere_mean_curvature, L)
    assert np.abs(leaf.coeffs[4:]).max() > 1e-6
    grid = opts.grid
    frame = compute_frame(leaf, grid, perturbed)
    K, M, mean = jacobi_matrices(frame, L)

    rng = np.random.default_rng(3)
    w = np.zeros(n_modes(L))
    w[mode_index(2, -2):n_modes(4)] = rng.normal(size=n_modes(4) - mode_index(2, -2))
    w = _mean_zero(w, mean)
    # 法線速度が w になる動径方向の変位
    speed = np.einsum("ni,ni->n", frame.physical.normal_covector, frame.directions)
    delta = analyze(synthesize_values(w, L, grid).reshape(-1) / speed, L, grid)

    eps = 1e-5
    moved = compute_frame(leaf.with_coeffs(leaf.coeffs + eps * delta), grid, perturbed, with_ricci=False)
    dH = (moved.H_g - frame.H_g) / eps
    Y = grid.basis(L)[0]
    # 弱形式で比べる: ∫ Y δH dμ_g と M·(M⁻¹K w)
    actual = Y @ (frame.dmu_g * dH)
    expected = M @ jacobi_apply(leaf, perturbed, w, grid=grid)
    assert np.linalg.norm(actual - expected) <= 1e-4 * np.linalg.norm(expected)


def test_jacobi_operator_is_symmetric(perturbed, sphere_mean_curvature):
    L = 8
    leaf, opts = _perturbed_leaf(perturbed, sphere_mean_curvature, L)
    _, M, mean = jacobi_matrices(compute_frame(leaf, opts.grid, perturbed), L)
    rng = np.random.default_rng(11)
    for _ in range(5):
        f = _mean_zero(rng.normal(size=n_modes(L)), mean)
        h = _mean_zero(rng.normal(size=n_modes(L)), mean)
        lhs = h @ M @ jacobi_apply(leaf, perturbed, f, grid=opts.grid)
        rhs = f @ M @ jacobi_apply(leaf, perturbed, h, grid=opts.grid)
        assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), 1.0)


def test_solving_a_converged_leaf_is_idempotent(perturbed, sphere_mean_curvature):
    leaf, opts = _perturbed_leaf(perturbed, sphere_mean_curvature)
    again = solve_cmc_with_stats(perturbed, sphere_mean_curvature(1.0, 30.0), leaf, opts)
    assert again.iterations <= 1
    np.testing.assert_allclose(again.surface.coeffs, leaf.coeffs, rtol=0, atol=1e-9)
    np.testing.assert_allclose(again.surface.center, leaf.center, rtol=0, atol=1e-9)


def test_stability_spectrum_eigenvalue_count(flat):
    surface = RadialSurface.sphere(10.0, L_max=2)
    with pytest.raises(ValueError):
        stability_spectrum(surface, flat, k=0)
    # 平均ゼロ部分空間は n_modes(2) - 1 = 8 次元
    report = stability_spectrum(surface, flat, k=100)
    assert report.eigenvalues.size == 8
    assert report.eigenfunctions.shape == (8, n_modes(2))
