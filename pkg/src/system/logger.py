import logging
from typing import Final


LOG_FORMAT: Final[str] = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = "INFO") -> None:
    """ルートロガーを一度だけ設定する"""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)
    logging.captureWarnings(True)


class LoggingHooks:
    """ステージの実行をログ出力するフック"""

    def __init__(self) -> None:
        self.logger = logging.getLogger("lab")

    def on_experiment_start(self, experiment: str) -> None:
        self.logger.info("Experiment started: %s", experiment)

    def on_stage_completion(self, stage: str, seconds: float) -> None:
        self.logger.info("Stage completed: %s in %.3fs", stage, seconds)

    def on_stage_error(self, stage: str, error: BaseException) -> None:
        self.logger.error("Stage error: %s - %s: %s", stage, type(error).__name__, error)

    def on_experiment_end(self, experiment: str, passed: bool) -> None:
        self.logger.info("Experiment finished: %s (%s)", experiment, "pass" if passed else "FAIL")


def setup(runner) -> None:
    runner.add_hooks(LoggingHooks())
