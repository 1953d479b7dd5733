from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Final, List, Optional
import json
import logging
import math

import numpy as np
import pandas as pd

from src.errors import IoFailure


SOFTWARE_VERSION: Final[str] = "0.1.0"
CSV_FLOAT_FORMAT: Final[str] = "%.17g"
REPORT_FILE: Final[str] = "report.json"
TIMINGS_FILE: Final[str] = "timings.json"

logger = logging.getLogger(__name__)


class ExportFormat(str, Enum):
    JSON = "json"
    CSV_BUNDLE = "csv_bundle"


class Relation(str, Enum):
    CLOSE = "close"  # |value - target| ≤ tolerance
    RELATIVE = "relative"  # |value - target| ≤ tolerance·|target|
    AT_MOST = "at_most"  # value ≤ target + tolerance
    AT_LEAST = "at_least"  # value ≥ target - tolerance


@dataclass
class Check:
    """許容誤差付きの合否判定"""

    name: str
    value: float
    target: float
    tolerance: float
    relation: Relation
    passed: bool

    @classmethod
    def evaluate(cls, name: str, value: float, target: float, tolerance: float, relation: Relation) -> "Check":
        value = float(value)
        relation = Relation(relation)
        if not math.isfinite(value):
            passed = False
        elif relation is Relation.CLOSE:
            passed = abs(value - target) <= tolerance
        elif relation is Relation.RELATIVE:
            passed = abs(value - target) <= tolerance * abs(target)
        elif relation is Relation.AT_MOST:
            passed = value <= target + tolerance
        else:
            passed = value >= target - tolerance
        return cls(name, value, float(target), float(tolerance), relation, bool(passed))


@dataclass
class StageFailure:
    stage: str
    error_type: str
    message: str


@dataclass
class Report:
    """一回の実験の結果一式"""

    experiment: str
    config: Dict[str, Any]
    records: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    checks: List[Check] = field(default_factory=list)
    failures: List[StageFailure] = field(default_factory=list)
    version: str = SOFTWARE_VERSION
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures and all(c.passed for c in self.checks)

    def add_table(self, name: str, frame: pd.DataFrame) -> None:
        self.records[name] = [_plain(row) for row in frame.to_dict(orient="records")]

    def add_check(self, name: str, value: float, target: float, tolerance: float, relation: Relation) -> Check:
        check = Check.evaluate(name, value, target, tolerance, relation)
        self.checks.append(check)
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, "Check %s: value=%.12g target=%.12g tol=%.3g -> %s",
                   name, check.value, check.target, check.tolerance, "pass" if check.passed else "FAIL")
        return check

    def add_failure(self, stage: str, error: BaseException) -> None:
        cause = getattr(error, "cause", None) or error
        self.failures.append(StageFailure(stage, type(cause).__name__, str(cause)))

    def to_dict(self) -> Dict[str, Any]:
        """timings を除いた決定的な内容"""
        data = asdict(self)
        data.pop("timings")
        data["passed"] = self.passed
        return _plain(data)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], timings: Optional[Dict[str, float]] = None) -> "Report":
        return cls(
            experiment=data["experiment"],
            config=data["config"],
            records=data["records"],
            summary=data["summary"],
            checks=[Check(**{**c, "relation": Relation(c["relation"])}) for c in data["checks"]],
            failures=[StageFailure(**f) for f in data["failures"]],
            version=data["version"],
            timings=dict(timings or {}),
        )


def _plain(obj: Any) -> Any:
    """numpy 型や Enum を JSON で表せる型に変換する"""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _dump(data: Any) -> str:
    # float は repr (往復で値が保存される最短表現) で出力される
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e


def export_report(report: Report, out_dir: str | Path, fmt: ExportFormat = ExportFormat.JSON) -> List[Path]:
    """report.json (または CSV 一式) と timings.json を書き出す"""
    out = Path(out_dir)
    written: List[Path] = []
    if ExportFormat(fmt) is ExportFormat.JSON:
        path = out / REPORT_FILE
        _write(path, _dump(report.to_dict()))
        written.append(path)
    else:
        for name, rows in report.records.items():
            path = out / f"{name}.csv"
            _write(path, pd.DataFrame(rows).to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))
            written.append(path)
        summary = pd.DataFrame(sorted(_plain(report.summary).items()), columns=["name", "value"])
        checks = pd.DataFrame([asdict(c) for c in report.checks],
                              columns=["name", "value", "target", "tolerance", "relation", "passed"])
        checks["relation"] = checks["relation"].map(lambda r: Relation(r).value)
        for name, frame in (("summary", summary), ("checks", checks)):
            path = out / f"{name}.csv"
            _write(path, frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n"))
            written.append(path)

    timings = out / TIMINGS_FILE
    _write(timings, _dump(_plain(report.timings)))
    written.append(timings)
    logger.info("Report written to %s (%d files)", out, len(written))
    return written


def load_report(out_dir: str | Path) -> Report:
    out = Path(out_dir)
    try:
        data = json.loads((out / REPORT_FILE).read_text(encoding="utf-8"))
        timings_path = out / TIMINGS_FILE
        timings = json.loads(timings_path.read_text(encoding="utf-8")) if timings_path.exists() else {}
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(out / REPORT_FILE, e) from e
    data.pop("passed", None)
    return Report.from_dict(data, timings)
