from typing import Final, Optional
import logging


ERROR_MESSAGES: Final[dict] = {
    "point_inside_core": "点 {} はモデルの有効領域外です (|x|={:.6g} < {:.6g})。",
    "insufficient_samples": "サンプル数が不足しています: {} 個 (最低 {} 個必要)。",
    "invalid_term": "摂動項が不正です: {}",
    "grid_too_coarse": "グリッドが粗すぎます: n_colat={} は L_max={} より大きくなければなりません。",
    "degenerate_surface": "曲面が退化しています: {}",
    "non_finite_integrand": "被積分関数に有限でない値が含まれています ({} 点)。",
    "format_error": "{} 行目: {}",
    "duplicate_mode": "{} 行目: モード (l={}, m={}) が重複しています。",
    "no_convergence": "Newton 法が収束しませんでした: {}",
    "jacobian_singular": "ヤコビアンが特異です (最小固有値 {:.3e})。",
    "left_validity_region": "反復が有効領域を離れました: {}",
    "not_mean_zero": "関数の平均がゼロではありません (∫f dμ = {:.3e})。",
    "radii_too_small": "半径の指定が不正です: {}",
    "zero_mass": "質量がゼロのため重心を定義できません。",
    "empty_band": "領域 '{}' にノードが含まれていません。",
    "invalid_scales": "スケールが不正です: K·r0={:.6g} は s/H={:.6g} より小さくなければなりません。",
    "degenerate_fit": "フィットが退化しています: {}",
    "empty_window": "窓 |X| ≤ {:.6g} にノードがありません。",
    "no_intermediate_region": "中間領域がありません (l_n={})。",
    "config_invalid": "設定エラー [{}]: {}",
    "stage_failed": "ステージ '{}' が失敗しました: {}",
    "io_failure": "ファイル操作に失敗しました ({}): {}",
}

logger = logging.getLogger(__name__)


class LabError(Exception):
    """ラボ全体の例外の基底クラス"""

    message_key: str = ""

    def __init__(self, *args: object) -> None:
        template = ERROR_MESSAGES.get(self.message_key)
        if template is not None:
            try:
                text = template.format(*args)
            except (IndexError, ValueError):
                text = " ".join(str(a) for a in args)
        else:
            text = " ".join(str(a) for a in args)
        super().__init__(text)
        self.args_raw = args


# metric_models
class PointInsideCore(LabError):
    message_key = "point_inside_core"


class InsufficientSamples(LabError):
    message_key = "insufficient_samples"


class InvalidTerm(LabError):
    message_key = "invalid_term"


# surface_geometry
class GridTooCoarse(LabError):
    message_key = "grid_too_coarse"


class DegenerateSurface(LabError):
    message_key = "degenerate_surface"


class NonFiniteIntegrand(LabError):
    message_key = "non_finite_integrand"


class FormatError(LabError):
    """表面ファイルの書式エラー (行番号付き)"""

    message_key = "format_error"

    def __init__(self, line: int, detail: str) -> None:
        super().__init__(line, detail)
        self.line = line


class DuplicateMode(FormatError):
    message_key = "duplicate_mode"

    def __init__(self, line: int, l: int, m: int) -> None:
        LabError.__init__(self, line, l, m)
        self.line = line
        self.mode = (l, m)


# cmc_solver
class NoConvergence(LabError):
    message_key = "no_convergence"


class JacobianSingular(LabError):
    message_key = "jacobian_singular"


class LeftValidityRegion(LabError):
    message_key = "left_validity_region"


class NotMeanZero(LabError):
    message_key = "not_mean_zero"


# geometric_functionals
class RadiiTooSmall(LabError):
    message_key = "radii_too_small"


class ZeroMass(LabError):
    message_key = "zero_mass"


class EmptyBand(LabError):
    message_key = "empty_band"


class InvalidScales(LabError):
    message_key = "invalid_scales"


# blowdown_analysis
class DegenerateFit(LabError):
    message_key = "degenerate_fit"


class EmptyWindow(LabError):
    message_key = "empty_window"


class NoIntermediateRegion(LabError):
    message_key = "no_intermediate_region"


# harness
class ConfigInvalid(LabError):
    """設定ファイルのエラー (キーパス付き)"""

    message_key = "config_invalid"

    def __init__(self, key_path: str, detail: str) -> None:
        super().__init__(key_path, detail)
        self.key_path = key_path


class StageFailed(LabError):
    message_key = "stage_failed"

    def __init__(self, stage: str, cause: Optional[BaseException] = None) -> None:
        super().__init__(stage, cause)
        self.stage = stage
        self.cause = cause


class IoFailure(LabError):
    message_key = "io_failure"


# 警告
class LabWarning(UserWarning):
    """計算は続行するが報告すべき状況"""


class RTViolation(LabWarning):
    pass


class TailEstimateDominates(LabWarning):
    pass
