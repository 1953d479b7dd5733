import asyncio
import json
from dataclasses import replace

import pytest

from src.errors import ConfigInvalid, ZeroMass
from src.geometry.metric_models import MetricKind
from src.system.config import EnvSettings, Experiment, load_config
from src.system.report import Relation
from src.system.runner import LabRunner, config_echo, run_experiment


class RecordingHooks:
    def __init__(self):
        self.events = []

    def on_experiment_start(self, experiment):
        self.events.append(("start", experiment))

    def on_stage_completion(self, stage, seconds):
        self.events.append(("done", stage))

    def on_stage_error(self, stage, error):
        self.events.append(("error", stage))

    def on_experiment_end(self, experiment, passed):
        self.events.append(("end", passed))


def _bare_runner(tmp_path):
    runner = LabRunner(EnvSettings(output_dir=str(tmp_path), threads=2, metrics=False))
    runner._loaded = True
    hooks = RecordingHooks()
    runner.add_hooks(hooks)
    return runner, hooks


def _fail():
    raise ZeroMass()


async def _fake_mass(ctx):
    value = await ctx.stage("square", lambda x: x * x, 3.0)
    ctx.check("square", value, 9.0, 1e-12, Relation.CLOSE)
    await ctx.stage("center_of_mass", _fail)
    points = await ctx.map_points("point", lambda p: p + 1, [1, 2, 3, 4])
    ctx.report.summary["points"] = points


def test_stage_failures_are_isolated(tmp_path):
    runner, hooks = _bare_runner(tmp_path)
    runner.register(Experiment.MASS, _fake_mass)
    report = asyncio.run(runner.run(load_config(None, "mass")))

    assert report.summary["points"] == [2, 3, 4, 5]
    assert [c.name for c in report.checks] == ["square"]
    assert report.checks[0].passed
    assert [(f.stage, f.error_type) for f in report.failures] == [("center_of_mass", "ZeroMass")]
    assert not report.passed
    assert hooks.events[0] == ("start", "mass")
    assert ("error", "center_of_mass") in hooks.events
    assert hooks.events[-1] == ("end", False)
    assert set(report.timings) >= {"square", "center_of_mass", "point[0]", "point[3]"}

    out = tmp_path / "mass"
    data = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert data["failures"][0]["stage"] == "center_of_mass"
    assert (out / "checks.csv").exists()
    assert (out / "timings.json").exists()


def test_config_tolerance_overrides_default(tmp_path):
    runner, _ = _bare_runner(tmp_path)
    runner.register(Experiment.MASS, _fake_mass)
    config = replace(load_config(None, "mass"), tolerances=(("square", 1e-3),))
    report = asyncio.run(runner.run(config))
    assert report.checks[0].tolerance == 1e-3


def test_unregistered_experiment(tmp_path):
    runner, _ = _bare_runner(tmp_path)
    with pytest.raises(ConfigInvalid):
        asyncio.run(runner.run(load_config(None, "qt_scan")))


def test_config_echo_drops_run_only_keys():
    config = load_config(None, "mass").with_overrides(out="elsewhere", threads=8)
    echo = config_echo(config)
    assert "output" not in echo and "threads" not in echo
    assert echo["experiment"] is Experiment.MASS


def test_mass_experiment_on_flat_space(tmp_path):
    config = load_config(None, "mass").with_overrides(out=str(tmp_path / "flat"))
    config = replace(config, metric=replace(config.metric, kind=MetricKind.FLAT, mass=0.0))
    env = EnvSettings(output_dir=str(tmp_path), metrics=True)
    report = run_experiment(config, env)
    assert report.passed, [(c.name, c.value) for c in report.checks if not c.passed]
    assert report.summary["extrapolated_mass"] == 0.0
    for name in ("report.json", "mass_radii.csv", "metrics.prom", "environment.json"):
        assert (tmp_path / "flat" / name).exists()


@pytest.mark.slow
def test_mass_experiment_on_schwarzschild(tmp_path):
    config = load_config(None, "mass").with_overrides(out=str(tmp_path / "schwarzschild"))
    report = run_experiment(config, EnvSettings(output_dir=str(tmp_path), metrics=False))
    assert report.passed, [(c.name, c.value) for c in report.checks if not c.passed]
    assert report.summary["extrapolated_mass"] == pytest.approx(1.0, abs=1e-4)


def test_cli_exit_codes(tmp_path, monkeypatch):
    from lab import EXIT_CONFIG, main

    monkeypatch.setenv("LAB_METRICS", "0")
    monkeypatch.delenv("LAB_THREADS", raising=False)
    bad = tmp_path / "bad.yaml"
    bad.write_text("metric:\n  kind: kerr\n", encoding="utf-8")
    assert main(["mass", "--config", str(bad)]) == EXIT_CONFIG

    good = tmp_path / "flat.yaml"
    good.write_text("metric:\n  kind: flat\n", encoding="utf-8")
    assert main(["mass", "--config", str(good), "--out", str(tmp_path / "cli"), "--threads", "2"]) == 0
    assert (tmp_path / "cli" / "report.json").exists()
    assert main(["mass", "--out", str(tmp_path / "x"), "--lmax", "1"]) == EXIT_CONFIG
