import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.errors import ConfigInvalid
from src.geometry.metric_models import MetricKind
from src.solver.cmc_solver import JacobianMode
from src.system.config import CHECK_NAMES, EnvSettings, Experiment, load_config, parse_config

QUADRUPOLE = [[1, 0, 0], [0, -1, 0], [0, 0, 0]]


def test_defaults_without_file():
    config = load_config(None, "foliate")
    assert config.experiment is Experiment.FOLIATE
    assert config.metric.kind is MetricKind.SCHWARZSCHILD
    assert config.solver.L_max == 16
    assert config.threads is None
    assert config.metric.to_model().mass == 1.0


def test_full_document(tmp_path):
    path = tmp_path / "qt.yaml"
    path.write_text(
        """
experiment: qt_scan
metric:
  kind: perturbed
  mass: 2
  center: [1, 0, 0]
  terms:
    - pattern: [[1, 0, 0], [0, -1, 0], [0, 0, 0]]
      exponent: -2
      profile: quadrupole
      axes: [[1, 0, 0], [0, 0, 1]]
solver:
  L_max: 12
  tol: 1e-9
  jacobian: finite_difference
grid:
  n_colat: 40
params:
  R_list: [1e4, 1e5]
  b: [0, 0, 2]
tolerances:
  qt_parts_sum: 1e-12
threads: 3
""",
        encoding="utf-8",
    )
    config = load_config(str(path))
    assert config.experiment is Experiment.QT_SCAN
    # PyYAML は 1e-9 を文字列として読む
    assert config.solver.tol_residual == 1e-9
    assert config.solver.jacobian_mode is JacobianMode.FINITE_DIFFERENCE
    assert config.R_list == (1e4, 1e5)
    assert config.b == (0.0, 0.0, 1.0)
    assert config.n_colat == 40
    assert config.threads == 3
    assert config.tolerance("qt_parts_sum", 1.0) == 1e-12
    assert config.tolerance("missing", 0.5) == 0.5
    model = config.metric.to_model()
    assert model.mass == 2.0
    np.testing.assert_array_equal(model.center, [1.0, 0.0, 0.0])
    assert len(model.perturbation_terms) == 1


def test_log_spaced_H_list_is_decreasing():
    config = parse_config({"params": {"log_H": {"start": 1e-3, "stop": 1e-1, "count": 3}}}, "foliate")
    assert config.H_list == pytest.approx((1e-1, 1e-2, 1e-3))


@pytest.mark.parametrize(
    "data, key_path",
    [
        ({"bogus": 1}, "bogus"),
        ({"metric": {"kind": "kerr"}}, "metric.kind"),
        ({"metric": {"mass": -1}}, "metric.mass"),
        ({"metric": {"terms": [{"exponent": -2}]}}, "metric.terms[0].pattern"),
        ({"solver": {"L_max": 1}}, "solver.L_max"),
        ({"solver": {"damping": 2}}, "solver.damping"),
        ({"params": {"radii": [10, -20]}}, "params.radii[1]"),
        ({"params": {"b": [0, 0, 0]}}, "params.b"),
        ({"params": {"H_list": [0.1], "log_H": {"start": 1, "stop": 2, "count": 2}}}, "params.log_H"),
        ({"params": {"log_H": {"start": 1, "stop": 2}}}, "params.log_H.count"),
        ({"params": {"seed": "x"}}, "params.seed"),
        ({"grid": {"n_colat": 1}}, "grid.n_colat"),
        ({"threads": 0}, "threads"),
        ({"output": 3}, "output"),
        ({"tolerances": {"extrapoalted_mass": 1.0}}, "tolerances.extrapoalted_mass"),
        ({"tolerances": {"qt_parts_sum": 1e-8}}, "tolerances.qt_parts_sum"),
        ({"metric": {"kind": "flat", "mass": 1}}, "metric.mass"),
        ({"metric": {"kind": "flat", "terms": [{"pattern": QUADRUPOLE, "exponent": -2}]}}, "metric.terms"),
        ({"metric": {"kind": "schwarzschild", "terms": [{"pattern": QUADRUPOLE, "exponent": -2}]}}, "metric.terms"),
    ],
)
def test_invalid_documents_name_the_key(data, key_path):
    with pytest.raises(ConfigInvalid) as info:
        parse_config(data, "mass")
    assert info.value.key_path == key_path


def test_experiment_is_required():
    with pytest.raises(ConfigInvalid) as info:
        parse_config({})
    assert info.value.key_path == "experiment"


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigInvalid) as info:
        load_config(str(tmp_path / "missing.yaml"), "mass")
    assert info.value.key_path == "--config"


def test_cli_overrides():
    config = load_config(None, "stability").with_overrides(out="run1", threads=4, grid=30, lmax=8)
    assert config.output == "run1"
    assert config.threads == 4
    assert config.n_colat == 30
    assert config.solver.to_options(config.n_colat).L_max == 8
    with pytest.raises(ConfigInvalid):
        config.with_overrides(lmax=1)


def test_env_settings(monkeypatch):
    monkeypatch.setenv("LAB_THREADS", "6")
    monkeypatch.setenv("LAB_LOG_LEVEL", "debug")
    monkeypatch.setenv("LAB_METRICS", "off")
    env = EnvSettings.from_env()
    assert env.threads == 6
    assert env.log_level == "DEBUG"
    assert env.metrics is False
    monkeypatch.setenv("LAB_THREADS", "zero")
    with pytest.raises(ConfigInvalid):
        EnvSettings.from_env()


@pytest.mark.parametrize("experiment", list(Experiment))
def test_shipped_configs_parse(experiment):
    path = Path(__file__).resolve().parents[1] / "data" / "configs" / f"{experiment.value}.yaml"
    config = load_config(str(path))
    assert config.experiment is experiment
    config.metric.to_model()


def test_flat_metric_with_mass_is_rejected_after_replace():
    config = load_config(None, "mass")
    metric = replace(config.metric, kind=MetricKind.FLAT)
    with pytest.raises(ConfigInvalid) as info:
        metric.to_model()
    assert info.value.key_path == "metric.mass"
    assert replace(metric, mass=0.0).to_model().is_flat


def test_known_tolerance_names_are_accepted():
    config = parse_config({"tolerances": {"extrapolated_mass": 1e-3, "F_100": 0.05}}, "mass")
    assert config.tolerance("extrapolated_mass", 1.0) == 1e-3


@pytest.mark.parametrize("experiment", list(Experiment))
def test_check_names_cover_every_reported_check(experiment):
    source = Path(__file__).resolve().parents[1] / "src" / "experiments" / f"{experiment.value}.py"
    reported = set(re.findall(r'ctx\.check\(\s*"([^"]+)"', source.read_text(encoding="utf-8")))
    assert reported == CHECK_NAMES[experiment]
