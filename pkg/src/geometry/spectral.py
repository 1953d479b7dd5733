from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Final, List, NamedTuple, Optional, Tuple
import logging

import numpy as np
from scipy.special import gammaln, lpmv, roots_legendre
from scipy.spatial.transform import Rotation

from src.errors import GridTooCoarse


FOUR_PI: Final[float] = 4.0 * np.pi
DEFAULT_PANEL_NODES: Final[int] = 24
DEFAULT_STRETCHED_LON: Final[int] = 32

logger = logging.getLogger(__name__)


def mode_index(l: int, m: int) -> int:
    """実球面調和関数 Y_lm の係数インデックス l² + l + m"""
    return l * l + l + m


def n_modes(L: int) -> int:
    return (L + 1) ** 2


@lru_cache(maxsize=None)
def mode_list(L: int) -> Tuple[Tuple[int, int], ...]:
    return tuple((l, m) for l in range(L + 1) for m in range(-l, l + 1))


@lru_cache(maxsize=None)
def _mode_arrays(L: int) -> Tuple[np.ndarray, np.ndarray]:
    modes = np.array(mode_list(L), dtype=int).reshape(-1, 2)
    return modes[:, 0], modes[:, 1]


class LegendreTable(NamedTuple):
    """(n_modes, n_theta) の正規化 Legendre 関数とその θ 微分 (√2 因子込み)"""
    P: np.ndarray
    dP: np.ndarray
    d2P: np.ndarray


class TrigTable(NamedTuple):
    """(2L+1, n_phi) の経度因子: m>0 は cos, m<0 は sin"""
    T: np.ndarray
    dT: np.ndarray
    d2T: np.ndarray


def legendre_table(theta: np.ndarray, L: int, with_derivatives: bool = True) -> LegendreTable:
    """Condon-Shortley 位相なしの正規化 Legendre 関数を θ 微分込みで計算する

    θ 微分は極でも安定な昇降演算子
    dP^m = ½[√((l+m)(l-m+1)) P^(m-1) - √((l+m+1)(l-m)) P^(m+1)]
    を用い、P^(-1) = -P^1 で m = 0 を閉じる。
    """
    theta = np.asarray(theta, dtype=float)
    x = np.cos(theta)
    n_t = theta.size
    P = np.zeros((n_modes(L), n_t))
    dP = np.zeros_like(P)
    d2P = np.zeros_like(P)

    for l in range(L + 1):
        base = np.zeros((l + 2, n_t))
        for m in range(l + 1):
            norm = np.sqrt((2 * l + 1) / FOUR_PI) * np.exp(0.5 * (gammaln(l - m + 1) - gammaln(l + m + 1)))
            base[m] = (-1) ** m * norm * lpmv(m, l, x)

        def ladder(values: np.ndarray) -> np.ndarray:
            out = np.zeros_like(values)
            for m in range(l + 1):
                lower = values[m - 1] if m > 0 else -values[1]
                up = np.sqrt((l + m + 1) * (l - m))
                down = np.sqrt((l + m) * (l - m + 1))
                out[m] = 0.5 * (down * lower - up * values[m + 1])
            return out

        if with_derivatives:
            d_base = ladder(base)
            d2_base = ladder(d_base)
        else:
            d_base = d2_base = np.zeros_like(base)
        for m in range(-l, l + 1):
            scale = 1.0 if m == 0 else np.sqrt(2.0)
            i = mode_index(l, m)
            P[i] = scale * base[abs(m)]
            dP[i] = scale * d_base[abs(m)]
            d2P[i] = scale * d2_base[abs(m)]
    return LegendreTable(P, dP, d2P)


def trig_table(phi: np.ndarray, L: int) -> TrigTable:
    phi = np.asarray(phi, dtype=float)
    ms = np.arange(-L, L + 1)[:, None]
    am = np.abs(ms)
    T = np.where(ms > 0, np.cos(am * phi), np.where(ms < 0, np.sin(am * phi), 1.0))
    dT = np.where(ms > 0, -am * np.sin(am * phi), np.where(ms < 0, am * np.cos(am * phi), 0.0))
    d2T = -(am ** 2) * T
    return TrigTable(T, dT, d2T)


@dataclass(frozen=True, eq=False)
class Sampling:
    """球面上の積構造サンプリング (θ × φ) と求積重み

    orientation R が与えられた場合、ノード方向は世界座標で ω = Rᵀ ω'(θ, φ) となる。
    """

    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    kind: str = "product"
    orientation: Optional[np.ndarray] = None
    _cache: Dict[Tuple[str, int], object] = field(default_factory=dict, repr=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.theta.size, self.phi.size)

    @property
    def size(self) -> int:
        return self.theta.size * self.phi.size

    @property
    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(-1)

    @property
    def theta_nodes(self) -> np.ndarray:
        return np.repeat(self.theta, self.phi.size)

    @property
    def local_directions(self) -> np.ndarray:
        """サンプリング座標での単位ベクトル (N,3)"""
        t, p = np.meshgrid(self.theta, self.phi, indexing="ij")
        return np.stack(
            [np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1
        ).reshape(-1, 3)

    @property
    def directions(self) -> np.ndarray:
        local = self.local_directions
        if self.orientation is None:
            return local
        return local @ self.orientation

    def legendre(self, L: int) -> LegendreTable:
        key = ("legendre", L)
        if key not in self._cache:
            self._cache[key] = legendre_table(self.theta, L)
        return self._cache[key]

    def trig(self, L: int) -> TrigTable:
        key = ("trig", L)
        if key not in self._cache:
            self._cache[key] = trig_table(self.phi, L)
        return self._cache[key]

    def basis(self, L: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """ノード上の Y, ∂_θY, ∂_φY を (n_modes, N) で返す"""
        key = ("basis", L)
        if key not in self._cache:
            leg = self.legendre(L)
            trig = self.trig(L)
            _, ms = _mode_arrays(L)
            rows = ms + L
            Y = (leg.P[:, :, None] * trig.T[rows][:, None, :]).reshape(len(ms), -1)
            Yt = (leg.dP[:, :, None] * trig.T[rows][:, None, :]).reshape(len(ms), -1)
            Yp = (leg.P[:, :, None] * trig.dT[rows][:, None, :]).reshape(len(ms), -1)
            self._cache[key] = (Y, Yt, Yp)
        return self._cache[key]


class QuadratureGrid(Sampling):
    """Gauss-Legendre (cos θ) × 等間隔経度の求積グリッド"""

    @property
    def n_colat(self) -> int:
        return self.theta.size

    @property
    def n_lon(self) -> int:
        return self.phi.size


@lru_cache(maxsize=64)
def quadrature_grid(n_colat: int) -> QuadratureGrid:
    """n_lon = 2·n_colat の求積グリッドを返す (重みの和は 4π)"""
    if n_colat < 1:
        raise GridTooCoarse(n_colat, 0)
    x, w = roots_legendre(n_colat)
    # θ 昇順 (北極から)
    order = np.argsort(-x)
    theta = np.arccos(x[order])
    n_lon = 2 * n_colat
    phi = 2.0 * np.pi * np.arange(n_lon) / n_lon
    weights = np.outer(w[order], np.full(n_lon, 2.0 * np.pi / n_lon))
    return QuadratureGrid(theta=theta, phi=phi, weights=weights, kind="gauss-legendre")


def default_colat(L_max: int) -> int:
    return max(L_max + 8, (3 * L_max) // 2 + 2)


@lru_cache(maxsize=64)
def _stretched_base(scale: float, panel_nodes: int, n_lon: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    edges = [0.0]
    edge = scale
    while edge < np.pi:
        edges.append(edge)
        edge *= 2.0
    edges.append(np.pi)
    x, w = roots_legendre(panel_nodes)
    thetas: List[np.ndarray] = []
    theta_w: List[np.ndarray] = []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        nodes = a + half * (x + 1.0)
        thetas.append(nodes)
        theta_w.append(half * w * np.sin(nodes))
    theta = np.concatenate(thetas)
    phi = 2.0 * np.pi * (np.arange(n_lon) + 0.5) / n_lon
    weights = np.outer(np.concatenate(theta_w), np.full(n_lon, 2.0 * np.pi / n_lon))
    return theta, phi, weights


def pole_rotation(direction: np.ndarray) -> np.ndarray:
    """direction を北極 e_z に移す回転行列 R (R·d = e_z)"""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    if np.allclose(d, [0.0, 0.0, 1.0]):
        return np.eye(3)
    if np.allclose(d, [0.0, 0.0, -1.0]):
        return np.diag([1.0, -1.0, -1.0])
    rotation, _ = Rotation.align_vectors([[0.0, 0.0, 1.0]], [d])
    return rotation.as_matrix()


def stretched_sampling(
    pole: np.ndarray,
    scale: float,
    panel_nodes: int = DEFAULT_PANEL_NODES,
    n_lon: int = DEFAULT_STRETCHED_LON,
) -> Sampling:
    """pole 方向に余緯度ノードを集中させた回転サンプリング

    余緯度は [0, scale, 2·scale, 4·scale, ..., π] の区間ごとの Gauss-Legendre、
    経度は半ステップずらした等間隔。
    """
    if not 0.0 < scale < np.pi:
        raise ValueError(f"scale must lie in (0, π), got {scale}")
    theta, phi, weights = _stretched_base(float(scale), int(panel_nodes), int(n_lon))
    return Sampling(
        theta=theta, phi=phi, weights=weights, kind="stretched",
        orientation=pole_rotation(pole),
    )


def probe_sampling(theta: np.ndarray, phi: np.ndarray) -> Sampling:
    """重みゼロの評価専用サンプリング"""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    return Sampling(theta=theta, phi=phi, weights=np.zeros((theta.size, phi.size)), kind="probe")


class SpectralFields(NamedTuple):
    """ノード上の値と角度微分 (各 (n_theta, n_phi))"""
    value: np.ndarray
    d_theta: np.ndarray
    d_phi: np.ndarray
    d_theta_theta: np.ndarray
    d_theta_phi: np.ndarray
    d_phi_phi: np.ndarray


def _check_coeffs(coeffs: np.ndarray, L: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (n_modes(L),):
        raise ValueError(f"expected {n_modes(L)} coefficients for L={L}, got {coeffs.shape}")
    return coeffs


def _per_order(coeffs: np.ndarray, table: np.ndarray, L: int) -> np.ndarray:
    _, ms = _mode_arrays(L)
    out = np.zeros((2 * L + 1, table.shape[1]))
    np.add.at(out, ms + L, coeffs[:, None] * table)
    return out


def synthesize_fields(coeffs: np.ndarray, L: int, sampling: Sampling) -> SpectralFields:
    """係数から値と一階・二階の角度微分を合成する"""
    coeffs = _check_coeffs(coeffs, L)
    leg = sampling.legendre(L)
    trig = sampling.trig(L)
    A = _per_order(coeffs, leg.P, L)
    dA = _per_order(coeffs, leg.dP, L)
    d2A = _per_order(coeffs, leg.d2P, L)
    return SpectralFields(
        value=A.T @ trig.T,
        d_theta=dA.T @ trig.T,
        d_phi=A.T @ trig.dT,
        d_theta_theta=d2A.T @ trig.T,
        d_theta_phi=dA.T @ trig.dT,
        d_phi_phi=A.T @ trig.d2T,
    )


def synthesize_values(coeffs: np.ndarray, L: int, sampling: Sampling) -> np.ndarray:
    coeffs = _check_coeffs(coeffs, L)
    A = _per_order(coeffs, sampling.legendre(L).P, L)
    return A.T @ sampling.trig(L).T


def analyze(values: np.ndarray, L: int, grid: QuadratureGrid) -> np.ndarray:
    """グリッド値から L 次までの係数を求める (c = ∫ f Y dσ)"""
    if not isinstance(grid, QuadratureGrid) or grid.n_colat <= L:
        raise GridTooCoarse(getattr(grid, "n_colat", grid.theta.size), L)
    values = np.asarray(values, dtype=float).reshape(grid.shape)
    leg = grid.legendre(L)
    trig = grid.trig(L)
    # G[m, t] = Σ_φ w f T_m
    G = trig.T @ (grid.weights * values).T
    _, ms = _mode_arrays(L)
    return np.einsum("it,it->i", leg.P, G[ms + L])


def integrate(values: np.ndarray, sampling: Sampling) -> float:
    return float(np.sum(sampling.flat_weights * np.asarray(values).reshape(-1)))


def direction_angles(directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    return theta, phi


def evaluate_at(coeffs: np.ndarray, L: int, directions: np.ndarray) -> np.ndarray:
    """任意方向 (N,3) で関数値を評価する"""
    coeffs = _check_coeffs(coeffs, L)
    theta, phi = direction_angles(directions)
    leg = legendre_table(theta, L, with_derivatives=False)
    trig = trig_table(phi, L)
    _, ms = _mode_arrays(L)
    return np.einsum("i,in,in->n", coeffs, leg.P, trig.T[ms + L])


def rotate_coefficients(coeffs: np.ndarray, L: int, rotation: np.ndarray) -> np.ndarray:
    """ρ'(ω) = ρ(Rᵀω) の係数を返す (次数 l は回転で保存される)"""
    grid = quadrature_grid(L + 2)
    # 行ベクトルで Rᵀω は ω @ R
    source = grid.directions @ np.asarray(rotation)
    return analyze(evaluate_at(coeffs, L, source), L, grid)
