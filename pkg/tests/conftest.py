import numpy as np
import pytest

from src.geometry.metric_models import MetricModel, MultipoleTerm
from src.geometry.spectral import quadrature_grid


def _sphere_mean_curvature(m: float, r: float) -> float:
    phi = 1.0 + m / (2.0 * r)
    return (2.0 / r) * (1.0 - m / (2.0 * r)) / phi ** 3


@pytest.fixture
def sphere_mean_curvature():
    """Schwarzschild の座標球面 |x| = r の平均曲率 (2/r)(1 - m/2r)/φ³"""
    return _sphere_mean_curvature


@pytest.fixture
def flat():
    return MetricModel.flat()


@pytest.fixture
def schwarzschild():
    return MetricModel.schwarzschild(1.0)


@pytest.fixture
def quadrupole_term():
    return MultipoleTerm(
        tensor_pattern=np.diag([1.0, -1.0, 0.0]),
        radial_exponent=-2.0,
        angular_profile="quadrupole",
        parity="even",
        axes=((1.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
    )


@pytest.fixture
def dipole_term():
    pattern = np.zeros((3, 3))
    pattern[0, 1] = pattern[1, 0] = 1.0
    return MultipoleTerm(
        tensor_pattern=pattern,
        radial_exponent=-2.0,
        angular_profile="dipole",
        parity="odd",
        axes=((0.0, 0.0, 1.0),),
    )


@pytest.fixture
def perturbed(quadrupole_term):
    return MetricModel.perturbed(1.0, [quadrupole_term])


@pytest.fixture
def grid():
    return quadrature_grid(24)
