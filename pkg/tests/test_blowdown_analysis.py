import numpy as np
import pytest

from src.errors import EmptyWindow, NoIntermediateRegion
from src.analysis.blowdown_analysis import (
    FitKind,
    annulus_schedule,
    annulus_schedule_from,
    blowdown_chain,
    gauss_map_energy,
    plane_fit,
    rescale_metric,
    rescale_surface,
    sphere_fit,
    tension_scan,
)
from src.analysis.geometric_functionals import family_sampling, off_center_sphere
from src.geometry.metric_models import perturbation_jets
from src.geometry.surface_geometry import RadialSurface
from src.solver.cmc_solver import FoliationEntry, FoliationRecord


def test_rescale_surface_is_a_group_action():
    surface = RadialSurface.ellipsoid((6.0, 5.0, 4.0), 6, center=(1.0, 2.0, 0.0))
    back = rescale_surface(rescale_surface(surface, 4.0), 0.25)
    np.testing.assert_allclose(back.coeffs, surface.coeffs, rtol=1e-15)
    np.testing.assert_allclose(back.center, surface.center, rtol=1e-15)
    with pytest.raises(ValueError):
        rescale_surface(surface, 0.0)


def test_rescale_metric_scales_perturbation(perturbed):
    r = 10.0
    X = np.array([[3.0, 1.0, -2.0], [0.5, 0.5, 4.0]])
    h_r, dh_r, _ = perturbation_jets(rescale_metric(perturbed, r), X)
    h, dh, _ = perturbation_jets(perturbed, r * X)
    np.testing.assert_allclose(h_r, r * h, rtol=1e-13)
    np.testing.assert_allclose(dh_r, r ** 2 * dh, rtol=1e-13, atol=1e-18)


def test_sphere_fit_recovers_shifted_sphere():
    fit = sphere_fit(RadialSurface.sphere(5.0, center=(1.0, 2.0, 3.0), L_max=4))
    assert fit.kind is FitKind.SPHERE
    assert fit.radius == pytest.approx(5.0, rel=1e-10)
    np.testing.assert_allclose(fit.center, [1.0, 2.0, 3.0], atol=1e-9)
    assert fit.max_deviation < 1e-8
    assert sphere_fit(RadialSurface.ellipsoid((6.0, 5.0, 4.0), 8)).max_deviation > 0.5


def test_plane_fit_near_far_sphere():
    surface = rescale_surface(off_center_sphere(1e4, 10.0), 0.1)
    fit = plane_fit(surface, 3.0)
    assert fit.kind is FitKind.PLANE
    assert fit.distance == pytest.approx(1.0, abs=1e-2)
    assert abs(fit.normal[0]) == pytest.approx(1.0, abs=1e-4)
    assert fit.max_deviation < 1e-2
    with pytest.raises(EmptyWindow):
        plane_fit(surface, 0.5)


def test_annulus_schedule():
    schedule = annulus_schedule_from(10.0, 2e-5, 10.0, 0.1, 1.0)
    assert schedule.l_n == 3
    np.testing.assert_allclose(schedule.boundaries, [100.0, 100.0 * np.e, 100.0 * np.e ** 2, 5000.0])
    assert len(schedule.bands) == 3
    with pytest.raises(NoIntermediateRegion):
        annulus_schedule_from(10.0, 2e-3, 10.0, 0.1, 1.0)
    with pytest.raises(ValueError):
        annulus_schedule_from(-1.0, 2e-5, 10.0, 0.1, 1.0)


def test_gauss_map_energy_on_far_sphere():
    R, r0 = 1e4, 10.0
    surface = off_center_sphere(R, r0)
    sampling = family_sampling(R, r0)
    schedule = annulus_schedule(surface, 10.0, 0.1, 0.5, sampling=sampling)
    assert schedule.l_n == 3
    profile = gauss_map_energy(surface, schedule, sampling, strict=True)
    # |∇ν|² = 2/R² なので全体は 8π
    assert profile.total == pytest.approx(8.0 * np.pi, rel=1e-8)
    assert profile.additivity_error < 1e-12
    # 帯の面積は外側ほど大きい
    assert profile.decay_direction() == "outer"
    frame = profile.to_frame()
    assert list(frame["i"]) == [1, 2, 3]
    assert (frame["sup_A_scaled"] <= np.sqrt(2.0) * frame["r_hi"] / R + 1e-12).all()


def test_tension_scan(schwarzschild):
    sphere = tension_scan(RadialSurface.sphere(10.0, L_max=4), schwarzschild)
    assert sphere.scaled_sup < 1e-9
    assert sphere.sup_grad_H_g < 1e-12
    ellipsoid = tension_scan(RadialSurface.ellipsoid((6.0, 5.0, 4.0), 8))
    assert ellipsoid.scaled_sup > 1.0
    assert ellipsoid.sup_grad_H_g is None


def test_blowdown_chain_of_coordinate_spheres(sphere_mean_curvature):
    record = FoliationRecord()
    for r in (10.0, 20.0, 40.0):
        H = sphere_mean_curvature(1.0, r)
        record.entries.append(
            FoliationEntry(H=H, surface=RadialSurface.sphere(r, L_max=4), r0=r, r1=r, center=(0.0, 0.0, 0.0),
                           lowest_meanzero_eigenvalue=0.0, newton_iters=0, residual=0.0)
        )
    chain = blowdown_chain(record)
    assert list(chain.columns) == ["H", "radius", "center_norm", "max_deviation"]
    expected = [0.5 * sphere_mean_curvature(1.0, r) * r for r in (10.0, 20.0, 40.0)]
    np.testing.assert_allclose(chain["radius"], expected, rtol=1e-10)
    assert chain["radius"].is_monotonic_increasing
    assert (chain["center_norm"] < 1e-9).all()
