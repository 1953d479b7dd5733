import numpy as np
import pytest

from src.errors import InsufficientSamples, InvalidTerm, PointInsideCore
from src.geometry.metric_models import (
    MetricKind,
    MetricModel,
    MultipoleTerm,
    decay_scan,
    eval_metric_jet,
    fd_jet_check,
    parity_decompose,
    perturbation_jets,
    scalar_curvature,
    scalar_curvature_field,
)


def test_schwarzschild_metric_is_conformally_flat(schwarzschild):
    jet = eval_metric_jet(schwarzschild, (10.0, 0.0, 0.0))
    np.testing.assert_allclose(jet.g, (1.0 + 1.0 / 20.0) ** 4 * np.eye(3), rtol=1e-15)
    # ∂_x g_xx = 4φ³·(-m/2r²)
    assert jet.dg[0, 0, 0] == pytest.approx(4.0 * 1.05 ** 3 * (-1.0 / 200.0), rel=1e-14)
    assert jet.dg[0, 1, 0] == 0.0


def test_flat_model_has_no_perturbation(flat):
    h, dh, d2h = perturbation_jets(flat, np.array([[0.1, 0.0, 0.0], [3.0, 4.0, 5.0]]))
    assert not h.any() and not dh.any() and not d2h.any()
    assert flat.mass == 0.0


def test_point_inside_core_is_rejected(schwarzschild):
    with pytest.raises(PointInsideCore):
        eval_metric_jet(schwarzschild, (0.5, 0.0, 0.0))


@pytest.mark.parametrize("point", [(30.0, 0.0, 0.0), (7.0, -3.0, 12.0), (2.0, 2.0, 2.0)])
def test_jets_agree_with_finite_differences(schwarzschild, perturbed, point):
    for model in (schwarzschild, perturbed):
        dg_error, d2g_error = fd_jet_check(model, point)
        assert dg_error < 1e-6
        assert d2g_error < 1e-5


def test_dipole_jets_agree_with_finite_differences(dipole_term):
    model = MetricModel.perturbed(0.0, [dipole_term])
    dg_error, d2g_error = fd_jet_check(model, (3.0, -4.0, 5.0))
    assert dg_error < 1e-6
    assert d2g_error < 1e-5


def test_schwarzschild_is_scalar_flat(schwarzschild):
    rng = np.random.default_rng(11)
    d = rng.normal(size=(200, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    X = np.exp(rng.uniform(np.log(2.0), np.log(1e3), size=200))[:, None] * d
    full, _ = scalar_curvature_field(schwarzschild, X)
    assert np.abs(full).max() < 1e-9


def test_perturbation_scalar_curvature_matches_linearization_far_out(quadrupole_term):
    model = MetricModel.perturbed(0.0, [quadrupole_term])
    far = scalar_curvature(model, (300.0, 100.0, 400.0))
    assert far.linearized != 0.0
    assert far.full == pytest.approx(far.linearized, rel=1e-3)


def test_parity_decomposition(schwarzschild, dipole_term):
    symmetric = parity_decompose(schwarzschild, (5.0, 1.0, -2.0))
    assert np.abs(symmetric.odd_part).max() == 0.0
    odd = parity_decompose(MetricModel.perturbed(0.0, [dipole_term]), (5.0, 1.0, -2.0))
    assert np.abs(odd.even_part).max() < 1e-17
    assert np.abs(odd.odd_part).max() > 0.0


def test_rescaled_model_evaluates_scaled_perturbation(schwarzschild):
    r = 100.0
    h, _, _ = perturbation_jets(schwarzschild.rescaled(r), np.array([[1.0, 0.0, 0.0]]))
    assert h[0, 0, 0] == pytest.approx(r * ((1.0 + 1.0 / (2.0 * r)) ** 4 - 1.0), rel=1e-14)


def test_translated_model_moves_the_core(schwarzschild):
    moved = schwarzschild.translated((5.0, 0.0, 0.0))
    h_moved, _, _ = perturbation_jets(moved, np.array([[15.0, 0.0, 0.0]]))
    h_base, _, _ = perturbation_jets(schwarzschild, np.array([[10.0, 0.0, 0.0]]))
    np.testing.assert_allclose(h_moved, h_base, rtol=1e-15)


def test_decay_scan_schwarzschild(schwarzschild):
    report = decay_scan(schwarzschild, [100.0, 200.0, 400.0, 800.0], [(1.0, 0.0, 0.0), (0.0, 0.6, 0.8)])
    assert report.exponent("h") == pytest.approx(-1.0, abs=0.03)
    assert report.exponent("dh") == pytest.approx(-2.0, abs=0.03)
    assert report.exponent("d2h") == pytest.approx(-3.0, abs=0.03)
    assert report.exponent("h_odd") is None
    assert not report.violations
    frame = report.to_frame()
    assert set(frame["status"]) == {"ok", "NotApplicable"}


def test_decay_scan_needs_four_radii(schwarzschild):
    with pytest.raises(InsufficientSamples):
        decay_scan(schwarzschild, [10.0, 20.0, 40.0], [(1.0, 0.0, 0.0)])


def test_decay_scan_measures_odd_part():
    pattern = np.zeros((3, 3))
    pattern[2, 2] = 1.0
    term = MultipoleTerm(pattern, -2.0, "dipole", "odd", ((1.0, 0.0, 0.0),))
    report = decay_scan(MetricModel.perturbed(0.0, [term]), [10.0, 20.0, 40.0, 80.0], [(1.0, 0.0, 0.0)])
    assert report.exponent("h_odd") == pytest.approx(-2.0, abs=1e-9)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"tensor_pattern": np.eye(3), "radial_exponent": -0.5},
        {"tensor_pattern": np.eye(3), "radial_exponent": -1.5, "angular_profile": "dipole", "parity": "odd",
         "axes": ((1.0, 0.0, 0.0),)},
        {"tensor_pattern": np.eye(3), "radial_exponent": -2.0, "angular_profile": "dipole", "parity": "even",
         "axes": ((1.0, 0.0, 0.0),)},
        {"tensor_pattern": np.eye(3), "radial_exponent": -2.0, "angular_profile": "quadrupole", "parity": "even",
         "axes": ((1.0, 0.0, 0.0),)},
        {"tensor_pattern": np.triu(np.ones((3, 3))), "radial_exponent": -1.0},
    ],
)
def test_invalid_terms(kwargs):
    with pytest.raises(InvalidTerm):
        MultipoleTerm(**kwargs)


def test_invalid_models(quadrupole_term):
    with pytest.raises(InvalidTerm):
        MetricModel(MetricKind.FLAT, mass_parameter=1.0)
    with pytest.raises(InvalidTerm):
        MetricModel(MetricKind.SCHWARZSCHILD, mass_parameter=1.0, perturbation_terms=(quadrupole_term,))
    with pytest.raises(InvalidTerm):
        MetricModel.schwarzschild(-1.0)
    with pytest.raises(InvalidTerm):
        MetricModel.schwarzschild(4.0, inner_radius=1.0)
