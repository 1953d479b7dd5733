from pathlib import Path
from typing import Final
import logging

from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile


METRICS_FILE: Final[str] = "metrics.prom"

logger = logging.getLogger(__name__)


class MetricsHooks:
    """実行ごとのレジストリにステージの実行数・失敗数・所要時間を記録する"""

    def __init__(self) -> None:
        self.registry = CollectorRegistry()

        # Prometheus metrics
        self.stage_count = Counter(
            'lab_stage_executions_total',
            'Total number of executed stages',
            ['stage'],
            registry=self.registry,
        )
        self.error_count = Counter(
            'lab_stage_errors_total',
            'Total number of failed stages',
            ['stage'],
            registry=self.registry,
        )
        self.newton_iterations = Counter(
            'lab_newton_iterations_total',
            'Total number of Newton iterations',
            registry=self.registry,
        )
        self.stage_seconds = Histogram(
            'lab_stage_seconds',
            'Wall-clock seconds per stage',
            ['stage'],
            registry=self.registry,
        )

    def on_stage_completion(self, stage: str, seconds: float) -> None:
        self.stage_count.labels(stage=stage).inc()
        self.stage_seconds.labels(stage=stage).observe(seconds)

    def on_stage_error(self, stage: str, error: BaseException) -> None:
        self.stage_count.labels(stage=stage).inc()
        self.error_count.labels(stage=stage).inc()

    def on_newton_iterations(self, count: int) -> None:
        self.newton_iterations.inc(count)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / METRICS_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            write_to_textfile(str(path), self.registry)
        except OSError as e:
            logger.error("Error in metrics export: %s", e, exc_info=True)
        return path


def setup(runner) -> None:
    if runner.env.metrics:
        runner.add_hooks(MetricsHooks())
