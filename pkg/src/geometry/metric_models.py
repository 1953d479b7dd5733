from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Final, List, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from src.errors import InsufficientSamples, InvalidTerm, PointInsideCore


MIN_DECAY_RADII: Final[int] = 4
FD_RELATIVE_STEP: Final[float] = 1e-4
ZERO_THRESHOLD: Final[float] = 1e-300
EXPONENT_SLACK: Final[float] = 0.05

# 宣言された減衰次数 (Def. 1-2 相当)
DECLARED_ORDERS: Final[dict] = {
    "h": -1.0,
    "dh": -2.0,
    "d2h": -3.0,
    "h_odd": -2.0,
}

logger = logging.getLogger(__name__)


class MetricKind(str, Enum):
    """計量モデルの種類"""
    FLAT = "flat"
    SCHWARZSCHILD = "schwarzschild"
    PERTURBED = "perturbed"


class AngularProfile(str, Enum):
    CONSTANT = "constant"
    DIPOLE = "dipole"
    QUADRUPOLE = "quadrupole"


class Parity(str, Enum):
    EVEN = "even"
    ODD = "odd"


_PROFILE_DEGREE: Final[dict] = {
    AngularProfile.CONSTANT: 0,
    AngularProfile.DIPOLE: 1,
    AngularProfile.QUADRUPOLE: 2,
}

_PROFILE_PARITY: Final[dict] = {
    AngularProfile.CONSTANT: Parity.EVEN,
    AngularProfile.DIPOLE: Parity.ODD,
    AngularProfile.QUADRUPOLE: Parity.EVEN,
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class MultipoleTerm:
    """多重極摂動項 h = P·Q(x)·|x|^(p - deg Q)

    Q は角度プロファイル (1, n·x, (n1·x)(n2·x)) で、|h| は |x|^p で減衰する。
    """

    tensor_pattern: np.ndarray
    radial_exponent: float
    angular_profile: AngularProfile = AngularProfile.CONSTANT
    parity: Parity = Parity.EVEN
    axes: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self) -> None:
        pattern = np.asarray(self.tensor_pattern, dtype=float)
        if pattern.shape != (3, 3) or not np.allclose(pattern, pattern.T):
            raise InvalidTerm("tensor_pattern は対称 3×3 行列でなければなりません")
        profile = AngularProfile(self.angular_profile)
        parity = Parity(self.parity)
        if self.radial_exponent > -1.0:
            raise InvalidTerm(f"radial_exponent={self.radial_exponent} > -1")
        if _PROFILE_PARITY[profile] is not parity:
            raise InvalidTerm(f"{profile.value} プロファイルの偶奇は {_PROFILE_PARITY[profile].value} です")
        if parity is Parity.ODD and self.radial_exponent > -2.0:
            raise InvalidTerm(f"奇項は radial_exponent ≤ -2 が必要です (got {self.radial_exponent})")
        needed = _PROFILE_DEGREE[profile]
        axes = tuple(tuple(float(v) for v in a) for a in self.axes)
        if len(axes) != needed or any(len(a) != 3 for a in axes):
            raise InvalidTerm(f"{profile.value} プロファイルには軸が {needed} 本必要です")
        object.__setattr__(self, "tensor_pattern", _frozen(pattern))
        object.__setattr__(self, "angular_profile", profile)
        object.__setattr__(self, "parity", parity)
        object.__setattr__(self, "axes", axes)

    @property
    def degree(self) -> int:
        return _PROFILE_DEGREE[self.angular_profile]

    def scalar_jets(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """a(y) = Q(y)|y|^q の値・勾配・ヘッセ行列 (y: (N,3))"""
        n_pts = y.shape[0]
        q = self.radial_exponent - self.degree
        r2 = np.einsum("ni,ni->n", y, y)
        r = np.sqrt(r2)

        if self.angular_profile is AngularProfile.CONSTANT:
            Q = np.ones(n_pts)
            dQ = np.zeros((n_pts, 3))
            d2Q = np.zeros((n_pts, 3, 3))
        elif self.angular_profile is AngularProfile.DIPOLE:
            n = np.asarray(self.axes[0])
            Q = y @ n
            dQ = np.broadcast_to(n, (n_pts, 3)).copy()
            d2Q = np.zeros((n_pts, 3, 3))
        else:
            n1 = np.asarray(self.axes[0])
            n2 = np.asarray(self.axes[1])
            p1 = y @ n1
            p2 = y @ n2
            Q = p1 * p2
            dQ = p2[:, None] * n1 + p1[:, None] * n2
            d2Q = np.broadcast_to(np.outer(n1, n2) + np.outer(n2, n1), (n_pts, 3, 3)).copy()

        rq = r ** q
        rq2 = r ** (q - 2)
        rq4 = r ** (q - 4)
        eye = np.eye(3)

        a = Q * rq
        da = dQ * rq[:, None] + (Q * q * rq2)[:, None] * y
        cross = np.einsum("nk,nl->nkl", dQ, y)
        d2a = (
            d2Q * rq[:, None, None]
            + (q * rq2)[:, None, None] * (cross + np.swapaxes(cross, 1, 2))
            + (Q * q)[:, None, None] * (
                (q - 2) * rq4[:, None, None] * np.einsum("nk,nl->nkl", y, y)
                + rq2[:, None, None] * eye
            )
        )
        return a, da, d2a


class MetricJet(NamedTuple):
    """一点での計量ジェット (g, ∂_k g_ij, ∂_l∂_k g_ij)"""
    g: np.ndarray
    dg: np.ndarray
    d2g: np.ndarray
    position: np.ndarray


class ParityPair(NamedTuple):
    even_part: np.ndarray
    odd_part: np.ndarray


class ScalarCurvature(NamedTuple):
    full: float
    linearized: float


@dataclass(frozen=True)
class MetricModel:
    """漸近的平坦な計量モデル g = δ + h

    h は中心 c と尺度 s を通じて h(x) = s·h_b(s·x - c) と評価される。
    s = 1, c = 0 が通常のモデルで、s ≠ 1 は再スケール h^r に対応する。
    """

    kind: MetricKind
    mass_parameter: float = 0.0
    perturbation_terms: Tuple[MultipoleTerm, ...] = ()
    inner_radius: Optional[float] = None
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def __post_init__(self) -> None:
        kind = MetricKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "perturbation_terms", tuple(self.perturbation_terms))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        if self.mass_parameter < 0:
            raise InvalidTerm(f"mass_parameter={self.mass_parameter} < 0")
        if kind is MetricKind.FLAT and (self.mass_parameter != 0 or self.perturbation_terms):
            raise InvalidTerm("平坦モデルは質量も摂動項も持ちません")
        if kind is MetricKind.SCHWARZSCHILD and self.perturbation_terms:
            raise InvalidTerm("Schwarzschild モデルに摂動項は指定できません")
        if self.scale <= 0:
            raise InvalidTerm(f"scale={self.scale} ≤ 0")
        if self.inner_radius is None:
            object.__setattr__(self, "inner_radius", max(1.0, float(self.mass_parameter)))
        elif self.inner_radius <= 0 or self.inner_radius <= self.mass_parameter / 2:
            raise InvalidTerm(f"inner_radius={self.inner_radius} が不正です")

    @classmethod
    def flat(cls) -> "MetricModel":
        return cls(MetricKind.FLAT)

    @classmethod
    def schwarzschild(cls, mass: float, **kwargs) -> "MetricModel":
        return cls(MetricKind.SCHWARZSCHILD, mass_parameter=mass, **kwargs)

    @classmethod
    def perturbed(cls, mass: float, terms: Sequence[MultipoleTerm], **kwargs) -> "MetricModel":
        return cls(MetricKind.PERTURBED, mass_parameter=mass, perturbation_terms=tuple(terms), **kwargs)

    @property
    def is_flat(self) -> bool:
        return self.kind is MetricKind.FLAT

    @property
    def mass(self) -> float:
        return float(self.mass_parameter)

    def rescaled(self, r: float) -> "MetricModel":
        """h^r(x) = r·h(rx) を返す"""
        if r <= 0:
            raise InvalidTerm(f"rescale factor {r} ≤ 0")
        return replace(self, scale=self.scale * r)

    def translated(self, shift: Sequence[float]) -> "MetricModel":
        """h を x - shift で評価するモデル (s = 1 のとき)"""
        c = np.asarray(self.center) + self.scale * np.asarray(shift, dtype=float)
        return replace(self, center=tuple(c))

    def base_points(self, X: np.ndarray) -> np.ndarray:
        return self.scale * X - np.asarray(self.center)

    def is_valid(self, X: np.ndarray) -> np.ndarray:
        if self.is_flat:
            return np.ones(np.atleast_2d(X).shape[0], dtype=bool)
        y = self.base_points(np.atleast_2d(X))
        return np.linalg.norm(y, axis=-1) >= self.inner_radius

    def check_valid(self, X: np.ndarray) -> None:
        X = np.atleast_2d(X)
        ok = self.is_valid(X)
        if not ok.all():
            bad = int(np.argmin(ok))
            y = self.base_points(X[bad:bad + 1])[0]
            raise PointInsideCore(tuple(X[bad]), float(np.linalg.norm(y)), float(self.inner_radius))


def _schwarzschild_jets(m: float, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """f(r) = (1 + m/2r)^4 - 1 とその導関数 (y: (N,3))"""
    r = np.linalg.norm(y, axis=-1)
    phi = 1.0 + m / (2.0 * r)
    f = phi ** 4 - 1.0
    f1 = -2.0 * m * phi ** 3 / r ** 2
    f2 = 3.0 * m ** 2 * phi ** 2 / r ** 4 + 4.0 * m * phi ** 3 / r ** 3
    u = y / r[:, None]
    df = f1[:, None] * u
    uu = np.einsum("nk,nl->nkl", u, u)
    d2f = f2[:, None, None] * uu + (f1 / r)[:, None, None] * (np.eye(3) - uu)
    return f, df, d2f


def _base_perturbation(model: MetricModel, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_pts = y.shape[0]
    h = np.zeros((n_pts, 3, 3))
    dh = np.zeros((n_pts, 3, 3, 3))
    d2h = np.zeros((n_pts, 3, 3, 3, 3))
    if model.is_flat:
        return h, dh, d2h

    eye = np.eye(3)
    if model.mass_parameter > 0:
        f, df, d2f = _schwarzschild_jets(model.mass_parameter, y)
        h += f[:, None, None] * eye
        dh += np.einsum("ij,nk->nijk", eye, df)
        d2h += np.einsum("ij,nkl->nijkl", eye, d2f)

    for term in model.perturbation_terms:
        a, da, d2a = term.scalar_jets(y)
        P = term.tensor_pattern
        h += a[:, None, None] * P
        dh += np.einsum("ij,nk->nijk", P, da)
        d2h += np.einsum("ij,nkl->nijkl", P, d2a)
    return h, dh, d2h


def perturbation_jets(model: MetricModel, X: np.ndarray, check: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """h, ∂h, ∂²h を点群 X (N,3) で評価する"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if check:
        model.check_valid(X)
    y = model.base_points(X)
    h, dh, d2h = _base_perturbation(model, y)
    s = model.scale
    if s != 1.0:
        h = s * h
        dh = s ** 2 * dh
        d2h = s ** 3 * d2h
    return h, dh, d2h


def metric_jets(model: MetricModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """g, ∂g, ∂²g を点群で評価する (レイアウト dg[..., i, j, k] = ∂_k g_ij)"""
    h, dh, d2h = perturbation_jets(model, X)
    g = h + np.eye(3)
    if not model.is_flat:
        lowest = np.linalg.eigvalsh(g)[:, 0]
        if np.any(lowest <= 0):
            raise InvalidTerm(f"g が正定値ではありません (最小固有値 {lowest.min():.3e})")
    return g, dh, d2h


def eval_metric_jet(model: MetricModel, x: Sequence[float]) -> MetricJet:
    """一点で MetricJet を返す

    Parameters
    ----------
    model : MetricModel
        計量モデル
    x : Sequence[float]
        評価点 (|x| ≥ inner_radius)

    Returns
    -------
    MetricJet
        g, dg, d2g と評価点
    """
    point = np.asarray(x, dtype=float).reshape(1, 3)
    g, dg, d2g = metric_jets(model, point)
    return MetricJet(g[0], dg[0], d2g[0], point[0].copy())


def christoffel_symbols(g: np.ndarray, dg: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Γ^i_jk とバッチ逆計量を返す"""
    ginv = np.linalg.inv(g)
    gamma = 0.5 * np.einsum("...il,...ljk->...ijk", ginv, _lowered_christoffel(dg))
    return gamma, ginv


def _lowered_christoffel(dg: np.ndarray) -> np.ndarray:
    # D[l, j, k] = ∂_j g_lk + ∂_k g_lj - ∂_l g_jk
    return (np.einsum("...lkj->...ljk", dg) + dg
            - np.einsum("...jkl->...ljk", dg))


def ricci_tensor(g: np.ndarray, dg: np.ndarray, d2g: np.ndarray) -> np.ndarray:
    """ジェットから Ricci テンソル R_jk を計算する (バッチ対応)"""
    gamma, ginv = christoffel_symbols(g, dg)
    D = _lowered_christoffel(dg)
    # ∂_m D_ljk
    dD = (np.einsum("...lkjm->...ljkm", d2g) + d2g
          - np.einsum("...jklm->...ljkm", d2g))
    dginv = -np.einsum("...ia,...abm,...bl->...ilm", ginv, dg, ginv)
    # dgamma[i, j, k, m] = ∂_m Γ^i_jk
    dgamma = 0.5 * (np.einsum("...ilm,...ljk->...ijkm", dginv, D)
                    + np.einsum("...il,...ljkm->...ijkm", ginv, dD))
    ricci = (np.einsum("...ijki->...jk", dgamma)
             - np.einsum("...iijk->...jk", dgamma)
             + np.einsum("...iip,...pjk->...jk", gamma, gamma)
             - np.einsum("...ikp,...pij->...jk", gamma, gamma))
    return 0.5 * (ricci + np.swapaxes(ricci, -1, -2))


def linearized_scalar(d2h: np.ndarray) -> np.ndarray:
    """h_ij,ij - h_ii,jj"""
    return np.einsum("...ijij->...", d2h) - np.einsum("...iijj->...", d2h)


def scalar_curvature_field(model: MetricModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """点群でのスカラー曲率 (完全形, 線形化) を返す"""
    g, dg, d2g = metric_jets(model, X)
    if model.is_flat:
        zeros = np.zeros(g.shape[0])
        return zeros, zeros.copy()
    ricci = ricci_tensor(g, dg, d2g)
    full = np.einsum("...jk,...jk->...", np.linalg.inv(g), ricci)
    return full, linearized_scalar(d2g)


def scalar_curvature(model: MetricModel, x: Sequence[float]) -> ScalarCurvature:
    full, lin = scalar_curvature_field(model, np.asarray(x, dtype=float).reshape(1, 3))
    return ScalarCurvature(float(full[0]), float(lin[0]))


def parity_decompose(model: MetricModel, x: Sequence[float]) -> ParityPair:
    """h の偶奇分解 f^even = f(x)+f(-x), f^odd = f(x)-f(-x)"""
    point = np.asarray(x, dtype=float).reshape(1, 3)
    pair = np.vstack([point, -point])
    h, _, _ = perturbation_jets(model, pair)
    return ParityPair(h[0] + h[1], h[0] - h[1])


def fd_jet_check(model: MetricModel, x: Sequence[float], eta: float = FD_RELATIVE_STEP) -> Tuple[float, float]:
    """中心差分で dg, d2g を検証し、最大相対誤差を返す (ステップ η|x|)"""
    point = np.asarray(x, dtype=float)
    step = eta * max(float(np.linalg.norm(point)), 1.0)
    offsets = np.vstack([point + step * e for e in np.eye(3)] + [point - step * e for e in np.eye(3)])
    h, dh, _ = perturbation_jets(model, offsets)
    jet = eval_metric_jet(model, point)

    fd_dg = np.stack([(h[k] - h[k + 3]) / (2 * step) for k in range(3)], axis=-1)
    fd_d2g = np.stack([(dh[l] - dh[l + 3]) / (2 * step) for l in range(3)], axis=-1)

    def _rel(approx: np.ndarray, exact: np.ndarray) -> float:
        peak = float(np.abs(exact).max())
        if peak == 0.0:
            return float(np.abs(approx).max())
        return float(np.abs(approx - exact).max() / peak)

    return _rel(fd_dg, jet.dg), _rel(fd_d2g, jet.d2g)


@dataclass
class DecayRow:
    direction: Tuple[float, float, float]
    quantity: str
    fitted_exponent: Optional[float]
    declared_order: float
    max_residual: Optional[float]
    status: str


@dataclass
class DecayReport:
    """減衰スキャンの結果"""

    radii: List[float]
    rows: List[DecayRow] = field(default_factory=list)

    @property
    def violations(self) -> List[DecayRow]:
        return [r for r in self.rows if r.status == "violation"]

    def exponent(self, quantity: str, direction_index: int = 0) -> Optional[float]:
        matches = [r for r in self.rows if r.quantity == quantity]
        return matches[direction_index].fitted_exponent

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "direction": [" ".join(repr(float(v)) for v in r.direction) for r in self.rows],
                "quantity": [r.quantity for r in self.rows],
                "fitted_exponent": [r.fitted_exponent if r.fitted_exponent is not None else np.nan for r in self.rows],
                "max_residual": [r.max_residual if r.max_residual is not None else np.nan for r in self.rows],
                "declared_order": [r.declared_order for r in self.rows],
                "status": [r.status for r in self.rows],
            }
        )


def _fit_exponent(radii: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    X = np.log(radii).reshape(-1, 1)
    y = np.log(values)
    model = LinearRegression().fit(X, y)
    residual = float(np.abs(model.predict(X) - y).max())
    return float(model.coef_[0]), residual


def decay_scan(model: MetricModel, radii: Sequence[float], directions: Sequence[Sequence[float]]) -> DecayReport:
    """両対数回帰で |h|, |∂h|, |∂²h|, |h^odd| の減衰指数を推定する"""
    radii_arr = np.asarray(radii, dtype=float)
    if radii_arr.size < MIN_DECAY_RADII:
        raise InsufficientSamples(int(radii_arr.size), MIN_DECAY_RADII)
    if np.any(np.diff(radii_arr) <= 0):
        raise InsufficientSamples(int(radii_arr.size), MIN_DECAY_RADII)

    report = DecayReport(radii=[float(r) for r in radii_arr])
    for direction in directions:
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        points = radii_arr[:, None] * d
        h, dh, d2h = perturbation_jets(model, points)
        h_neg, _, _ = perturbation_jets(model, -points)
        magnitudes = {
            "h": np.linalg.norm(h.reshape(len(radii_arr), -1), axis=1),
            "dh": np.linalg.norm(dh.reshape(len(radii_arr), -1), axis=1),
            "d2h": np.linalg.norm(d2h.reshape(len(radii_arr), -1), axis=1),
            "h_odd": np.linalg.norm((h - h_neg).reshape(len(radii_arr), -1), axis=1),
        }
        for quantity, values in magnitudes.items():
            declared = DECLARED_ORDERS[quantity]
            # 恒等的にゼロの量には指数を定義しない
            if np.any(values <= ZERO_THRESHOLD):
                report.rows.append(DecayRow(tuple(d), quantity, None, declared, None, "NotApplicable"))
                continue
            exponent, residual = _fit_exponent(radii_arr, values)
            status = "violation" if exponent > declared + EXPONENT_SLACK else "ok"
            report.rows.append(DecayRow(tuple(d), quantity, exponent, declared, residual, status))
            if status == "violation":
                logger.warning("Decay violation for %s along %s: exponent %.3f > %.1f", quantity, tuple(d), exponent, declared)
    return report
