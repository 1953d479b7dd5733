import json

import numpy as np
import pandas as pd
import pytest

from src.errors import IoFailure, ZeroMass
from src.system.report import Check, ExportFormat, Relation, Report, export_report, load_report


@pytest.mark.parametrize(
    "value, target, tolerance, relation, passed",
    [
        (1.00005, 1.0, 1e-4, Relation.CLOSE, True),
        (1.0002, 1.0, 1e-4, Relation.CLOSE, False),
        (105.0, 100.0, 0.05, Relation.RELATIVE, True),
        (106.0, 100.0, 0.05, Relation.RELATIVE, False),
        (1e-5, 0.0, 1e-4, Relation.AT_MOST, True),
        (-3.0, 0.0, 1e-4, Relation.AT_MOST, True),
        (2.4, 2.5, 0.0, Relation.AT_LEAST, False),
        (float("nan"), 0.0, 1.0, Relation.AT_MOST, False),
    ],
)
def test_check_relations(value, target, tolerance, relation, passed):
    assert Check.evaluate("c", value, target, tolerance, relation).passed is passed


def _sample_report() -> Report:
    report = Report(experiment="mass", config={"radii": [100.0, 200.0]})
    report.add_table("mass_radii", pd.DataFrame({"R": np.array([100.0, 200.0]), "mass_estimate": [0.1 + 0.2, 1.0 / 3.0]}))
    report.summary["extrapolated_mass"] = np.float64(0.9999871)
    report.add_check("extrapolated_mass", 0.9999871, 1.0, 1e-4, Relation.CLOSE)
    report.timings["adm_mass"] = 0.25
    return report


def test_json_export_round_trip(tmp_path):
    report = _sample_report()
    export_report(report, tmp_path)
    loaded = load_report(tmp_path)
    assert loaded.to_dict() == report.to_dict()
    assert loaded.timings == {"adm_mass": 0.25}
    # 浮動小数は往復で同じ値
    assert loaded.records["mass_radii"][0]["mass_estimate"] == 0.1 + 0.2
    data = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert data["passed"] is True
    assert "timings" not in data


def test_failures_make_report_fail():
    report = _sample_report()
    report.add_failure("center_of_mass", ZeroMass())
    assert not report.passed
    assert report.failures[0].error_type == "ZeroMass"


def test_csv_bundle(tmp_path):
    written = export_report(_sample_report(), tmp_path, ExportFormat.CSV_BUNDLE)
    names = sorted(p.name for p in written)
    assert names == ["checks.csv", "mass_radii.csv", "summary.csv", "timings.json"]
    frame = pd.read_csv(tmp_path / "mass_radii.csv")
    assert frame["mass_estimate"][0] == 0.1 + 0.2
    checks = pd.read_csv(tmp_path / "checks.csv")
    assert checks["relation"][0] == "close"


def test_load_missing_report(tmp_path):
    with pytest.raises(IoFailure):
        load_report(tmp_path)
