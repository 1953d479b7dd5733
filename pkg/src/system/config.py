from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Final, Mapping, Optional, Tuple
import logging
import os

import numpy as np
import yaml
from dotenv import load_dotenv

from src.errors import ConfigInvalid
from src.geometry.metric_models import MetricKind, MetricModel, MultipoleTerm
from src.solver.cmc_solver import JacobianMode, SolverOptions


DEFAULT_OUTPUT_DIR: Final[str] = "out"
DEFAULT_LOG_LEVEL: Final[str] = "INFO"

logger = logging.getLogger(__name__)


class Experiment(str, Enum):
    MASS = "mass"
    CENTER_OF_MASS = "center_of_mass"
    FOLIATE = "foliate"
    STABILITY = "stability"
    QT_SCAN = "qt_scan"
    BLOWDOWN = "blowdown"
    CERTIFICATES = "certificates"
    UNIQUENESS_PROBE = "uniqueness_probe"


# 各実験が報告するチェック名 (tolerances で上書きできるもの)
CHECK_NAMES: Final[Dict[Experiment, frozenset]] = {
    Experiment.MASS: frozenset(
        {"extrapolated_mass", "mass_flux_closed_form", "mass_flux_within_tail", "flux_mass_consistency",
         "divergence_closure", "F_100"}
    ),
    Experiment.CENTER_OF_MASS: frozenset({"center_error"}),
    Experiment.FOLIATE: frozenset(
        {"leaves_converged", "max_center_norm", "max_r1_over_r0", "max_residual", "lambda1_positive",
         "lambda1_zero", "lambda1_r3_spread", "H2_remainder_variation", "Aring_scaled_variation"}
    ),
    Experiment.STABILITY: frozenset({"eigenvalues_zero", "lambda1_positive", "stability_inequality"}),
    Experiment.QT_SCAN: frozenset(
        {"qt_symmetric_zero", "qt_parts_sum", "qt_monotone_steps", "qt_total_limit", "qt_intermediate_share",
         "qt_family_zero", "energy_additivity", "energy_band_monotone"}
    ),
    Experiment.BLOWDOWN: frozenset(
        {"blowdown_radius_trend", "blowdown_center", "blowdown_radius_closed_form", "tension_zero",
         "tension_scaled_variation", "plane_distance", "rescaled_decay_exponent"}
    ),
    Experiment.CERTIFICATES: frozenset(
        {"decay_violations", "fd_dg_error", "fd_d2g_error", "scalar_flatness", "expansion_residual_order",
         "gauss_map_identity", "H2_remainder", "H2_remainder_decreasing"}
    ),
    Experiment.UNIQUENESS_PROBE: frozenset({"all_converged", "max_pairwise_distance"}),
}


@dataclass(frozen=True)
class EnvSettings:
    """環境変数 (.env) から読む実行環境の設定"""

    log_level: str = DEFAULT_LOG_LEVEL
    output_dir: str = DEFAULT_OUTPUT_DIR
    threads: int = 1
    metrics: bool = True

    @classmethod
    def from_env(cls) -> "EnvSettings":
        load_dotenv()
        threads = os.getenv("LAB_THREADS", "1")
        try:
            n_threads = int(threads)
        except ValueError as e:
            raise ConfigInvalid("env.LAB_THREADS", f"整数ではありません: {threads!r}") from e
        if n_threads < 1:
            raise ConfigInvalid("env.LAB_THREADS", "1 以上が必要です")
        return cls(
            log_level=os.getenv("LAB_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper(),
            output_dir=os.getenv("LAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR),
            threads=n_threads,
            metrics=os.getenv("LAB_METRICS", "1").lower() not in ("0", "false", "no", "off"),
        )


@dataclass(frozen=True)
class TermConfig:
    pattern: Tuple[Tuple[float, ...], ...]
    exponent: float
    profile: str = "constant"
    parity: str = "even"
    axes: Tuple[Tuple[float, ...], ...] = ()

    def to_term(self) -> MultipoleTerm:
        return MultipoleTerm(self.pattern, self.exponent, self.profile, self.parity, self.axes)


@dataclass(frozen=True)
class MetricConfig:
    kind: MetricKind = MetricKind.SCHWARZSCHILD
    mass: float = 1.0
    inner_radius: Optional[float] = None
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    terms: Tuple[TermConfig, ...] = ()

    def to_model(self) -> MetricModel:
        _check_kind(self.kind, self.mass, self.terms)
        if self.kind is MetricKind.FLAT:
            return MetricModel.flat()
        kwargs: Dict[str, Any] = {"inner_radius": self.inner_radius}
        if self.kind is MetricKind.SCHWARZSCHILD:
            model = MetricModel.schwarzschild(self.mass, **kwargs)
        else:
            model = MetricModel.perturbed(self.mass, [t.to_term() for t in self.terms], **kwargs)
        return model.translated(self.center) if any(self.center) else model


@dataclass(frozen=True)
class SolverConfig:
    L_max: int = 16
    tol_residual: float = 1e-10
    max_newton_iters: int = 30
    damping: float = 1.0
    jacobian_mode: JacobianMode = JacobianMode.ANALYTIC

    def to_options(self, n_colat: Optional[int] = None) -> SolverOptions:
        return SolverOptions(
            tol_residual=self.tol_residual,
            max_newton_iters=self.max_newton_iters,
            damping=self.damping,
            L_max=self.L_max,
            jacobian_mode=self.jacobian_mode,
            n_colat=n_colat,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """一つの実験の設定 (YAML から厳密に読み込む)"""

    experiment: Experiment
    metric: MetricConfig = field(default_factory=MetricConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_colat: Optional[int] = None
    radii: Tuple[float, ...] = ()
    H_list: Tuple[float, ...] = ()
    R_list: Tuple[float, ...] = ()
    H_target: Optional[float] = None
    r0: float = 10.0
    K: float = 10.0
    s: float = 0.1
    L: float = 1.0
    b: Tuple[float, float, float] = (-1.0, 0.0, 0.0)
    window: float = 5.0
    seed: int = 0
    n_inits: int = 20
    k_eigen: int = 3
    tolerances: Tuple[Tuple[str, float], ...] = ()
    output: Optional[str] = None
    threads: Optional[int] = None

    def tolerance(self, name: str, default: float) -> float:
        return dict(self.tolerances).get(name, default)

    def with_overrides(
        self,
        out: Optional[str] = None,
        threads: Optional[int] = None,
        grid: Optional[int] = None,
        lmax: Optional[int] = None,
    ) -> "ExperimentConfig":
        """CLI フラグによる上書き"""
        config = self
        if out is not None:
            config = replace(config, output=out)
        if threads is not None:
            config = replace(config, threads=_positive_int("threads", threads))
        if grid is not None:
            config = replace(config, n_colat=_positive_int("grid", grid))
        if lmax is not None:
            config = replace(config, solver=replace(config.solver, L_max=_at_least("lmax", lmax, 2)))
        return config


_TOP_KEYS: Final[frozenset] = frozenset(
    {"experiment", "metric", "solver", "grid", "params", "tolerances", "output", "threads"}
)
_METRIC_KEYS: Final[frozenset] = frozenset({"kind", "mass", "inner_radius", "center", "terms"})
_TERM_KEYS: Final[frozenset] = frozenset({"pattern", "exponent", "profile", "parity", "axes"})
_SOLVER_KEYS: Final[frozenset] = frozenset({"L_max", "tol", "max_iters", "damping", "jacobian"})
_GRID_KEYS: Final[frozenset] = frozenset({"n_colat"})
_PARAM_KEYS: Final[frozenset] = frozenset(
    {"radii", "H_list", "log_H", "R_list", "H_target", "r0", "K", "s", "L", "b", "window", "seed", "n_inits", "k_eigen"}
)
_LOG_H_KEYS: Final[frozenset] = frozenset({"start", "stop", "count"})


def _require_mapping(value: Any, path: str) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigInvalid(path, "マッピングが必要です")
    return value


def _check_keys(block: Mapping[str, Any], allowed: frozenset, path: str) -> None:
    for key in block:
        if key not in allowed:
            raise ConfigInvalid(f"{path}.{key}" if path else str(key), "不明なキーです")


def _number(value: Any, path: str) -> float:
    # PyYAML は "1e-10" を文字列として読む
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid(path, f"数値が必要です: {value!r}")
    return float(value)


def _positive(path: str, value: Any) -> float:
    number = _number(value, path)
    if number <= 0:
        raise ConfigInvalid(path, f"正の値が必要です: {number}")
    return number


def _positive_int(path: str, value: Any) -> int:
    return _at_least(path, value, 1)


def _at_least(path: str, value: Any, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigInvalid(path, f"整数が必要です: {value!r}")
    if value < minimum:
        raise ConfigInvalid(path, f"{minimum} 以上が必要です: {value}")
    return value


def _vector(value: Any, path: str, length: Optional[int] = None) -> Tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigInvalid(path, "リストが必要です")
    if length is not None and len(value) != length:
        raise ConfigInvalid(path, f"長さ {length} のリストが必要です")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _positive_list(value: Any, path: str) -> Tuple[float, ...]:
    numbers = _vector(value, path)
    for i, v in enumerate(numbers):
        if v <= 0:
            raise ConfigInvalid(f"{path}[{i}]", f"正の値が必要です: {v}")
    return numbers


def _enum(enum_type, value: Any, path: str):
    try:
        return enum_type(value)
    except ValueError as e:
        choices = ", ".join(m.value for m in enum_type)
        raise ConfigInvalid(path, f"{value!r} は {{{choices}}} のいずれでもありません") from e


def _parse_term(block: Any, path: str) -> TermConfig:
    block = _require_mapping(block, path)
    _check_keys(block, _TERM_KEYS, path)
    for key in ("pattern", "exponent"):
        if key not in block:
            raise ConfigInvalid(f"{path}.{key}", "必須キーです")
    pattern = block["pattern"]
    if not isinstance(pattern, (list, tuple)) or len(pattern) != 3:
        raise ConfigInvalid(f"{path}.pattern", "3×3 行列が必要です")
    axes = block.get("axes", [])
    if not isinstance(axes, (list, tuple)):
        raise ConfigInvalid(f"{path}.axes", "リストが必要です")
    return TermConfig(
        pattern=tuple(_vector(row, f"{path}.pattern[{i}]", 3) for i, row in enumerate(pattern)),
        exponent=_number(block["exponent"], f"{path}.exponent"),
        profile=str(block.get("profile", "constant")),
        parity=str(block.get("parity", "even")),
        axes=tuple(_vector(a, f"{path}.axes[{i}]", 3) for i, a in enumerate(axes)),
    )


def _check_kind(kind: MetricKind, mass: float, terms: Tuple[Any, ...]) -> None:
    if kind is MetricKind.FLAT and mass != 0.0:
        raise ConfigInvalid("metric.mass", f"flat では質量を指定できません: {mass}")
    if kind is not MetricKind.PERTURBED and terms:
        raise ConfigInvalid("metric.terms", f"{kind.value} では摂動項を指定できません")


def _parse_metric(block: Any) -> MetricConfig:
    block = _require_mapping(block, "metric")
    _check_keys(block, _METRIC_KEYS, "metric")
    kind = _enum(MetricKind, block.get("kind", "schwarzschild"), "metric.kind")
    mass = _number(block.get("mass", 0.0 if kind is MetricKind.FLAT else 1.0), "metric.mass")
    if mass < 0:
        raise ConfigInvalid("metric.mass", "負の質量は指定できません")
    inner = block.get("inner_radius")
    terms = block.get("terms", [])
    if not isinstance(terms, (list, tuple)):
        raise ConfigInvalid("metric.terms", "リストが必要です")
    _check_kind(kind, mass, tuple(terms))
    return MetricConfig(
        kind=kind,
        mass=mass,
        inner_radius=None if inner is None else _positive("metric.inner_radius", inner),
        center=_vector(block.get("center", [0.0, 0.0, 0.0]), "metric.center", 3),
        terms=tuple(_parse_term(t, f"metric.terms[{i}]") for i, t in enumerate(terms)),
    )


def _parse_solver(block: Any) -> SolverConfig:
    block = _require_mapping(block, "solver")
    _check_keys(block, _SOLVER_KEYS, "solver")
    defaults = SolverConfig()
    damping = _positive("solver.damping", block.get("damping", defaults.damping))
    if damping > 1.0:
        raise ConfigInvalid("solver.damping", f"(0, 1] の範囲外です: {damping}")
    return SolverConfig(
        L_max=_at_least("solver.L_max", block.get("L_max", defaults.L_max), 2),
        tol_residual=_positive("solver.tol", block.get("tol", defaults.tol_residual)),
        max_newton_iters=_positive_int("solver.max_iters", block.get("max_iters", defaults.max_newton_iters)),
        damping=damping,
        jacobian_mode=_enum(JacobianMode, block.get("jacobian", defaults.jacobian_mode.value), "solver.jacobian"),
    )


def _log_spaced(block: Any) -> Tuple[float, ...]:
    block = _require_mapping(block, "params.log_H")
    _check_keys(block, _LOG_H_KEYS, "params.log_H")
    for key in _LOG_H_KEYS:
        if key not in block:
            raise ConfigInvalid(f"params.log_H.{key}", "必須キーです")
    start = _positive("params.log_H.start", block["start"])
    stop = _positive("params.log_H.stop", block["stop"])
    count = _at_least("params.log_H.count", block["count"], 1)
    # 大きい H から小さい H へ
    values = np.geomspace(max(start, stop), min(start, stop), count)
    return tuple(float(v) for v in values)


def _parse_params(block: Any) -> Dict[str, Any]:
    block = _require_mapping(block, "params")
    _check_keys(block, _PARAM_KEYS, "params")
    if "H_list" in block and "log_H" in block:
        raise ConfigInvalid("params.log_H", "H_list と同時には指定できません")
    parsed: Dict[str, Any] = {}
    for key in ("radii", "H_list", "R_list"):
        if key in block:
            parsed[key] = _positive_list(block[key], f"params.{key}")
    if "log_H" in block:
        parsed["H_list"] = _log_spaced(block["log_H"])
    for key in ("H_target", "r0", "K", "s", "L", "window"):
        if key in block:
            parsed[key] = _positive(f"params.{key}", block[key])
    if "b" in block:
        b = _vector(block["b"], "params.b", 3)
        norm = sum(v * v for v in b) ** 0.5
        if norm == 0:
            raise ConfigInvalid("params.b", "ゼロベクトルは指定できません")
        parsed["b"] = tuple(v / norm for v in b)
    if "seed" in block:
        parsed["seed"] = _at_least("params.seed", block["seed"], 0)
    for key in ("n_inits", "k_eigen"):
        if key in block:
            parsed[key] = _positive_int(f"params.{key}", block[key])
    return parsed


def _parse_tolerances(block: Any, experiment: Experiment) -> Tuple[Tuple[str, float], ...]:
    block = _require_mapping(block, "tolerances")
    known = CHECK_NAMES[experiment]
    for key in block:
        if key not in known:
            raise ConfigInvalid(f"tolerances.{key}", f"{experiment.value} にこの名前のチェックはありません")
    return tuple((str(k), _positive(f"tolerances.{k}", v)) for k, v in block.items())


def parse_config(data: Any, experiment: Optional[str] = None) -> ExperimentConfig:
    """YAML から読んだ辞書を ExperimentConfig に変換する

    experiment を与えた場合はファイルの experiment キーより優先する。
    """
    data = _require_mapping(data, "")
    _check_keys(data, _TOP_KEYS, "")
    name = experiment if experiment is not None else data.get("experiment")
    if name is None:
        raise ConfigInvalid("experiment", "必須キーです")
    kind = _enum(Experiment, name, "experiment")
    grid = _require_mapping(data.get("grid"), "grid")
    _check_keys(grid, _GRID_KEYS, "grid")
    n_colat = grid.get("n_colat")
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigInvalid("output", "文字列が必要です")
    return ExperimentConfig(
        experiment=kind,
        metric=_parse_metric(data.get("metric")),
        solver=_parse_solver(data.get("solver")),
        n_colat=None if n_colat is None else _at_least("grid.n_colat", n_colat, 2),
        tolerances=_parse_tolerances(data.get("tolerances"), kind),
        output=output,
        threads=None if data.get("threads") is None else _positive_int("threads", data["threads"]),
        **_parse_params(data.get("params")),
    )


def load_config(path: Optional[str], experiment: Optional[str] = None) -> ExperimentConfig:
    """YAML ファイル (または設定なし) から実験設定を読み込む"""
    if path is None:
        return parse_config({}, experiment)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigInvalid("--config", f"{path} を読めません: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigInvalid("--config", f"YAML の構文エラー: {e}") from e
    return parse_config(data, experiment)
