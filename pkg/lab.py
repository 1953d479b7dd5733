import argparse
import logging
import os
import sys
from typing import List, Optional

# 現在のディレクトリをPythonパスに追加
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.errors import ConfigInvalid, IoFailure  # noqa: E402
from src.system.config import EnvSettings, Experiment, load_config  # noqa: E402
from src.system.logger import configure_logging  # noqa: E402
from src.system.runner import run_experiment  # noqa: E402

EXIT_FAILED = 1
EXIT_CONFIG = 2

logger = logging.getLogger("lab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="漸近的平坦計量と CMC 球面の数値実験")
    subparsers = parser.add_subparsers(dest="experiment", required=True)
    for experiment in Experiment:
        sub = subparsers.add_parser(experiment.value, help=f"{experiment.value} 実験を実行する")
        sub.add_argument("--config", help="YAML 設定ファイル")
        sub.add_argument("--out", help="出力ディレクトリ")
        sub.add_argument("--threads", type=int, help="並列スレッド数")
        sub.add_argument("--grid", type=int, help="求積格子の余緯度点数 n_colat")
        sub.add_argument("--lmax", type=int, help="曲面の球面調和次数 L_max")
        sub.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出力する")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = EnvSettings.from_env()
    except ConfigInvalid as e:
        configure_logging()
        logger.error("Invalid environment: %s", e)
        return EXIT_CONFIG
    configure_logging("DEBUG" if args.verbose else env.log_level)

    try:
        config = load_config(args.config, args.experiment).with_overrides(
            out=args.out, threads=args.threads, grid=args.grid, lmax=args.lmax
        )
        report = run_experiment(config, env)
    except ConfigInvalid as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG
    except IoFailure as e:
        logger.error("Error writing results: %s", e)
        return EXIT_FAILED

    failed = [c.name for c in report.checks if not c.passed]
    if report.passed:
        logger.info("%s passed (%d checks)", args.experiment, len(report.checks))
        return 0
    logger.warning("%s failed: checks=%s stages=%s", args.experiment, failed, [f.stage for f in report.failures])
    return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
