from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, Final, List, Optional, Sequence
import asyncio
import importlib
import logging
import os
import time

import pandas as pd

from src.errors import ConfigInvalid, InvalidTerm, LabError, StageFailed
from src.geometry.metric_models import MetricModel
from src.solver.cmc_solver import SolverOptions
from src.system.config import EnvSettings, Experiment, ExperimentConfig
from src.system.report import ExportFormat, Relation, Report, export_report


PLUGIN_PACKAGES: Final[tuple] = ("src/system", "src/experiments")
REPO_ROOT: Final[Path] = Path(__file__).resolve().parents[2]

logger = logging.getLogger(__name__)

ExperimentHandler = Callable[["RunContext"], Awaitable[None]]


def config_echo(config: ExperimentConfig) -> Dict[str, Any]:
    """結果に影響しない項目 (出力先, スレッド数) を除いた設定"""
    data = asdict(config)
    data.pop("output")
    data.pop("threads")
    data["tolerances"] = dict(config.tolerances)
    return data


@dataclass
class RunContext:
    """実験ハンドラに渡される実行コンテキスト"""

    runner: "LabRunner"
    config: ExperimentConfig
    report: Report
    out_dir: Path
    model: MetricModel
    threads: int = 1
    _stage_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def solver_options(self) -> SolverOptions:
        return self.config.solver.to_options(self.config.n_colat)

    def _timing_key(self, name: str) -> str:
        count = self._stage_counts.get(name, 0)
        self._stage_counts[name] = count + 1
        return name if count == 0 else f"{name}#{count}"

    async def stage(self, name: str, func: Callable[..., Any], *args: Any, **kwargs: Any) -> Optional[Any]:
        """一つのステージを実行する。失敗は StageFailed として記録し None を返す"""
        key = self._timing_key(name)
        start = time.perf_counter()
        try:
            if asyncio.iscoroutinefunction(func):
                result = await func(*args, **kwargs)
            else:
                result = await asyncio.to_thread(func, *args, **kwargs)
        except Exception as e:
            seconds = time.perf_counter() - start
            self.report.timings[key] = seconds
            failure = StageFailed(name, e)
            logger.error("Error in %s: %s", name, e, exc_info=not isinstance(e, LabError))
            self.runner.dispatch("stage_error", name, failure)
            self.report.add_failure(name, failure)
            return None
        seconds = time.perf_counter() - start
        self.report.timings[key] = seconds
        self.runner.dispatch("stage_completion", name, seconds)
        return result

    async def map_points(self, name: str, func: Callable[..., Any], points: Sequence[Any]) -> List[Optional[Any]]:
        """独立なパラメータ点を並列に実行する (結果は入力順)"""
        semaphore = asyncio.Semaphore(self.threads)

        async def run(index: int, point: Any) -> Optional[Any]:
            async with semaphore:
                return await self.stage(f"{name}[{index}]", func, point)

        return list(await asyncio.gather(*(run(i, p) for i, p in enumerate(points))))

    def newton_iterations(self, count: int) -> None:
        self.runner.dispatch("newton_iterations", int(count))

    def table(self, name: str, frame: pd.DataFrame) -> None:
        self.report.add_table(name, frame)

    def check(self, name: str, value: float, target: float, tolerance: float, relation: Relation) -> None:
        self.report.add_check(name, value, target, self.config.tolerance(name, tolerance), relation)


class LabRunner:
    """実験モジュールとフックを読み込み、設定に従って実験を実行する"""

    def __init__(self, env: Optional[EnvSettings] = None) -> None:
        self.env = env or EnvSettings.from_env()
        self.experiments: Dict[Experiment, ExperimentHandler] = {}
        self.hooks: List[Any] = []
        self._loaded = False

    def register(self, experiment: Experiment, handler: ExperimentHandler) -> None:
        self.experiments[Experiment(experiment)] = handler

    def add_hooks(self, hooks: Any) -> None:
        self.hooks.append(hooks)

    def dispatch(self, event: str, *args: Any) -> None:
        for hooks in self.hooks:
            listener = getattr(hooks, f"on_{event}", None)
            if listener is None:
                continue
            try:
                listener(*args)
            except Exception as e:
                logger.error("Error in hook %s.on_%s: %s", type(hooks).__name__, event, e, exc_info=True)

    async def load_plugins(self, packages: Sequence[str] = PLUGIN_PACKAGES) -> None:
        """パッケージ内の各モジュールを読み込み setup(runner) を呼ぶ"""
        if self._loaded:
            return
        names = []
        for package in packages:
            for root, _, files in os.walk(REPO_ROOT / package):
                for file in sorted(files):
                    if file.endswith('.py') and not file.startswith('_'):
                        relative = os.path.relpath(os.path.join(root, file[:-3]), REPO_ROOT)
                        names.append(relative.replace(os.sep, '.'))
        # 登録順を決定的にする
        modules = await asyncio.gather(*(asyncio.to_thread(importlib.import_module, n) for n in sorted(names)))
        for module in modules:
            setup = getattr(module, "setup", None)
            if setup is not None:
                setup(self)
        self._loaded = True
        logger.debug("Loaded %d plugin modules, %d experiments", len(names), len(self.experiments))

    def _out_dir(self, config: ExperimentConfig) -> Path:
        return Path(config.output or os.path.join(self.env.output_dir, config.experiment.value))

    async def run(self, config: ExperimentConfig) -> Report:
        await self.load_plugins()
        handler = self.experiments.get(config.experiment)
        if handler is None:
            raise ConfigInvalid("experiment", f"{config.experiment.value} は登録されていません")
        try:
            model = config.metric.to_model()
        except InvalidTerm as e:
            raise ConfigInvalid("metric", str(e)) from e

        out_dir = self._out_dir(config)
        report = Report(experiment=config.experiment.value, config=config_echo(config))
        threads = config.threads or self.env.threads
        context = RunContext(self, config, report, out_dir, model, threads)

        self.dispatch("experiment_start", config.experiment.value)
        try:
            await handler(context)
        except LabError as e:
            logger.error("Error in %s: %s", config.experiment.value, e, exc_info=True)
            report.add_failure(config.experiment.value, e)
        self.dispatch("experiment_end", config.experiment.value, report.passed)

        export_report(report, out_dir, ExportFormat.JSON)
        export_report(report, out_dir, ExportFormat.CSV_BUNDLE)
        for hooks in self.hooks:
            writer = getattr(hooks, "write", None)
            if writer is not None:
                writer(out_dir)
        return report


def run_experiment(config: ExperimentConfig, env: Optional[EnvSettings] = None) -> Report:
    """設定に従って実験を一回実行し Report を返す"""
    return asyncio.run(LabRunner(env).run(config))
