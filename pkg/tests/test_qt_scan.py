import pytest

from src.analysis.blowdown_analysis import AnnulusSchedule, EnergyProfile, EnergyRow
from src.experiments.qt_scan import band_pattern_holds


def _profile(energies):
    schedule = AnnulusSchedule(K=10.0, s=0.1, L=1.0, l_n=len(energies), boundaries=(), r0=10.0, H=2e-5)
    rows = [EnergyRow(i, 0.0, 0.0, e, 0.0, 0.0, 0.0, 1) for i, e in enumerate(energies)]
    return EnergyProfile(schedule, rows, inner_cap=0.0, outer_cap=0.0, total=sum(energies))


@pytest.mark.parametrize(
    "energies, holds",
    [
        ([0.1, 0.2, 0.4], True),
        ([0.4, 0.2, 0.1], False),
        ([0.1, 0.3, 0.2], False),
        ([0.1, 0.2], False),
    ],
)
def test_band_pattern_requires_decay_from_outer_end(energies, holds):
    assert band_pattern_holds(_profile(energies)) is holds
