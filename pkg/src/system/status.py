import json
import logging
import platform
import time
from datetime import timedelta
from pathlib import Path
from typing import Dict, Final

import numpy as np
import pandas as pd
import psutil
import scipy
import sklearn


ENVIRONMENT_FILE: Final[str] = "environment.json"

logger = logging.getLogger(__name__)


class SystemStatus:
    """実行環境の情報を集めるクラス"""

    def get_system_info(self) -> Dict[str, str]:
        process = psutil.Process()
        memory = psutil.virtual_memory()
        return {
            "python": platform.python_version(),
            "platform": platform.platform(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "scikit-learn": sklearn.__version__,
            "cpu_count": str(psutil.cpu_count(logical=True)),
            "cpu_percent": f"{psutil.cpu_percent()}%",
            "memory_total": f"{memory.total / 2 ** 30:.1f} GiB",
            "memory_percent": f"{process.memory_percent():.1f}%",
            "uptime": str(timedelta(seconds=int(time.time() - process.create_time()))),
        }


class EnvironmentHooks:
    """実験終了時に environment.json を書き出すフック"""

    def __init__(self) -> None:
        self.system = SystemStatus()

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / ENVIRONMENT_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(self.system.get_system_info(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            logger.error("Error in environment snapshot: %s", e, exc_info=True)
        return path


def setup(runner) -> None:
    runner.add_hooks(EnvironmentHooks())
