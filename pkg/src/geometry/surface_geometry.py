from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Final, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy.optimize import minimize

from src.errors import DegenerateSurface, GridTooCoarse, NonFiniteIntegrand
from src.geometry.metric_models import (
    MetricModel,
    christoffel_symbols,
    metric_jets,
    perturbation_jets,
    ricci_tensor,
)
from src.geometry.spectral import (
    QuadratureGrid,
    Sampling,
    SpectralFields,
    analyze,
    default_colat,
    evaluate_at,
    mode_index,
    n_modes,
    quadrature_grid,
    rotate_coefficients,
    synthesize_fields,
    synthesize_values,
)


OVERSAMPLING: Final[int] = 4
POLISH_TOLERANCE: Final[float] = 1e-9

logger = logging.getLogger(__name__)


class Measure(str, Enum):
    EUCLIDEAN = "euclidean"
    PHYSICAL = "physical"


@dataclass(frozen=True, eq=False)
class RadialSurface:
    """中心 c と半径関数 ρ(ω) の球面調和係数で表す閉曲面 X(ω) = c + ρ(ω)ω"""

    center: np.ndarray
    coeffs: np.ndarray
    L_max: int

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=float).reshape(3)
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if self.L_max < 0 or coeffs.size != n_modes(self.L_max):
            raise ValueError(f"L_max={self.L_max} requires {n_modes(self.L_max)} coefficients, got {coeffs.size}")
        center.setflags(write=False)
        coeffs.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def sphere(cls, radius: float, center: Sequence[float] = (0.0, 0.0, 0.0), L_max: int = 0) -> "RadialSurface":
        coeffs = np.zeros(n_modes(L_max))
        coeffs[0] = radius * np.sqrt(4.0 * np.pi)
        return cls(np.asarray(center, dtype=float), coeffs, L_max)

    @classmethod
    def from_function(
        cls,
        radius_function: Callable[[np.ndarray], np.ndarray],
        L_max: int,
        center: Sequence[float] = (0.0, 0.0, 0.0),
        n_colat: Optional[int] = None,
    ) -> "RadialSurface":
        """ρ(ω) を細かいグリッドで解析して係数化する"""
        grid = quadrature_grid(n_colat or 2 * L_max + 8)
        values = np.asarray(radius_function(grid.directions), dtype=float)
        return cls(np.asarray(center, dtype=float), analyze(values, L_max, grid), L_max)

    @classmethod
    def ellipsoid(
        cls,
        semi_axes: Sequence[float],
        L_max: int,
        center: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "RadialSurface":
        a = np.asarray(semi_axes, dtype=float)

        def rho(directions: np.ndarray) -> np.ndarray:
            return 1.0 / np.sqrt(np.sum((directions / a) ** 2, axis=1))

        return cls.from_function(rho, L_max, center, n_colat=3 * L_max + 16)

    @property
    def mean_radius(self) -> float:
        return float(self.coeffs[0] / np.sqrt(4.0 * np.pi))

    def coefficient(self, l: int, m: int) -> float:
        return float(self.coeffs[mode_index(l, m)])

    def with_coeffs(self, coeffs: np.ndarray, center: Optional[np.ndarray] = None) -> "RadialSurface":
        return RadialSurface(self.center if center is None else center, coeffs, self.L_max)

    def extended(self, L_max: int) -> "RadialSurface":
        """係数を L_max 次まで拡張 (または切り詰め) する"""
        coeffs = np.zeros(n_modes(L_max))
        keep = min(n_modes(L_max), self.coeffs.size)
        coeffs[:keep] = self.coeffs[:keep]
        return RadialSurface(self.center, coeffs, L_max)

    def radius_at(self, directions: np.ndarray) -> np.ndarray:
        return evaluate_at(self.coeffs, self.L_max, directions)

    def points_at(self, directions: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius_at(d)[:, None] * d


class MetricFrame(NamedTuple):
    """一つの計量に関するノードごとの曲面幾何量"""
    metric: Optional[np.ndarray]
    metric_derivative: Optional[np.ndarray]
    induced: np.ndarray
    induced_inv: np.ndarray
    normal_covector: np.ndarray
    normal: np.ndarray
    normal_norm: np.ndarray
    second_form: np.ndarray
    mean_curvature: np.ndarray
    norm_A2: np.ndarray
    norm_Aring2: np.ndarray
    area_density: np.ndarray
    ricci_nn: Optional[np.ndarray]


@dataclass(frozen=True, eq=False)
class SurfaceFrame:
    """サンプリング上の曲面幾何量 (ベクトルは世界座標)"""

    surface: RadialSurface
    sampling: Sampling
    fields: SpectralFields
    directions: np.ndarray
    position: np.ndarray
    tangents: np.ndarray
    second_derivatives: np.ndarray
    euclidean: MetricFrame
    physical: MetricFrame
    weights: np.ndarray

    @property
    def H_e(self) -> np.ndarray:
        return self.euclidean.mean_curvature

    @property
    def H_g(self) -> np.ndarray:
        return self.physical.mean_curvature

    @property
    def nu_e(self) -> np.ndarray:
        return self.euclidean.normal

    @property
    def nu_g(self) -> np.ndarray:
        return self.physical.normal

    @property
    def dmu_e(self) -> np.ndarray:
        return self.weights * self.euclidean.area_density

    @property
    def dmu_g(self) -> np.ndarray:
        return self.weights * self.physical.area_density

    @property
    def grad_nu_e(self) -> np.ndarray:
        """|∇_e ν| (平坦空間では |A_e| に一致)"""
        return np.sqrt(self.euclidean.norm_A2)

    @property
    def radius_norm(self) -> np.ndarray:
        return np.linalg.norm(self.position, axis=1)

    def measure(self, which: Measure) -> np.ndarray:
        return self.dmu_e if Measure(which) is Measure.EUCLIDEAN else self.dmu_g


def _flatten_fields(fields: SpectralFields) -> SpectralFields:
    return SpectralFields(*(np.asarray(f).reshape(-1) for f in fields))


def synthesize(surface: RadialSurface, sampling: Sampling) -> SpectralFields:
    """ρ とその角度微分をノード上に合成する"""
    if isinstance(sampling, QuadratureGrid) and sampling.n_colat <= surface.L_max:
        raise GridTooCoarse(sampling.n_colat, surface.L_max)
    return synthesize_fields(surface.coeffs, surface.L_max, sampling)


def _embedding(rho: SpectralFields, theta: np.ndarray, phi: np.ndarray, center: np.ndarray):
    """X とその一階・二階の座標微分"""
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    zero = np.zeros_like(theta)
    w = np.stack([st * cp, st * sp, ct], axis=1)
    w_t = np.stack([ct * cp, ct * sp, -st], axis=1)
    w_p = np.stack([-st * sp, st * cp, zero], axis=1)
    w_tp = np.stack([-ct * sp, ct * cp, zero], axis=1)
    w_pp = np.stack([-st * cp, -st * sp, zero], axis=1)

    r, r_t, r_p = rho.value[:, None], rho.d_theta[:, None], rho.d_phi[:, None]
    r_tt, r_tp, r_pp = rho.d_theta_theta[:, None], rho.d_theta_phi[:, None], rho.d_phi_phi[:, None]

    X = center + r * w
    X_t = r_t * w + r * w_t
    X_p = r_p * w + r * w_p
    X_tt = r_tt * w + 2.0 * r_t * w_t - r * w
    X_tp = r_tp * w + r_t * w_p + r_p * w_t + r * w_tp
    X_pp = r_pp * w + 2.0 * r_p * w_p + r * w_pp
    tangents = np.stack([X_t, X_p], axis=1)
    second = np.stack([np.stack([X_tt, X_tp], axis=1), np.stack([X_tp, X_pp], axis=1)], axis=1)
    return w, X, tangents, second


def _rotate_jets(g: np.ndarray, dg: np.ndarray, d2g: np.ndarray, R: np.ndarray):
    g_r = np.einsum("ia,jb,nab->nij", R, R, g)
    dg_r = np.einsum("ia,jb,kc,nabc->nijk", R, R, R, dg)
    d2g_r = np.einsum("ia,jb,kc,ld,nabcd->nijkl", R, R, R, R, d2g)
    return g_r, dg_r, d2g_r


def metric_frame(
    tangents: np.ndarray,
    second: np.ndarray,
    theta: np.ndarray,
    g: Optional[np.ndarray] = None,
    dg: Optional[np.ndarray] = None,
    d2g: Optional[np.ndarray] = None,
    with_ricci: bool = False,
) -> MetricFrame:
    """接ベクトルと計量ジェットから基本形式・法線・平均曲率を計算する"""
    if g is None:
        f = np.einsum("nai,nbi->nab", tangents, tangents)
    else:
        f = np.einsum("nai,nij,nbj->nab", tangents, g, tangents)
    det = f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] ** 2
    if np.any(~np.isfinite(det)) or np.any(det <= 0):
        raise DegenerateSurface(f"det f ≤ 0 at {int(np.sum(~(det > 0)))} nodes")
    finv = np.empty_like(f)
    finv[:, 0, 0] = f[:, 1, 1] / det
    finv[:, 1, 1] = f[:, 0, 0] / det
    finv[:, 0, 1] = finv[:, 1, 0] = -f[:, 0, 1] / det

    n = np.cross(tangents[:, 0], tangents[:, 1])
    if g is None:
        norm = np.linalg.norm(n, axis=1)
        n_hat = n / norm[:, None]
        nu = n_hat
        accel = second
    else:
        gamma, ginv = christoffel_symbols(g, dg)
        norm = np.sqrt(np.einsum("ni,nij,nj->n", n, ginv, n))
        n_hat = n / norm[:, None]
        nu = np.einsum("nij,nj->ni", ginv, n_hat)
        accel = second + np.einsum("njkl,nak,nbl->nabj", gamma, tangents, tangents)

    A = -np.einsum("nj,nabj->nab", n_hat, accel)
    H = np.einsum("nab,nab->n", finv, A)
    A_up = np.einsum("nac,ncd,ndb->nab", finv, A, finv)
    norm_A2 = np.einsum("nab,nab->n", A_up, A)
    ricci_nn = None
    if with_ricci and g is not None:
        ricci = ricci_tensor(g, dg, d2g)
        ricci_nn = np.einsum("ni,nij,nj->n", nu, ricci, nu)
    elif with_ricci:
        ricci_nn = np.zeros_like(H)

    return MetricFrame(
        metric=g,
        metric_derivative=dg,
        induced=f,
        induced_inv=finv,
        normal_covector=n_hat,
        normal=nu,
        normal_norm=norm,
        second_form=A,
        mean_curvature=H,
        norm_A2=norm_A2,
        norm_Aring2=np.maximum(norm_A2 - 0.5 * H ** 2, 0.0),
        area_density=np.sqrt(det) / np.sin(theta),
        ricci_nn=ricci_nn,
    )


def compute_frame(
    surface: RadialSurface,
    sampling: Sampling,
    model: Optional[MetricModel] = None,
    with_ricci: bool = True,
) -> SurfaceFrame:
    """Euclid と物理計量の両方でノードごとの幾何量を計算する

    sampling が回転を持つ場合は回転座標系で計算し、ベクトル量を世界座標に戻す。
    """
    R = sampling.orientation
    if R is None:
        local = surface
    else:
        local = RadialSurface(R @ surface.center, rotate_coefficients(surface.coeffs, surface.L_max, R), surface.L_max)

    fields = _flatten_fields(synthesize(local, sampling))
    if np.any(fields.value <= 0):
        raise DegenerateSurface(f"ρ ≤ 0 at {int(np.sum(fields.value <= 0))} nodes")

    theta = sampling.theta_nodes
    phi = np.tile(sampling.phi, sampling.theta.size)
    w, X, tangents, second = _embedding(fields, theta, phi, local.center)
    euclid = metric_frame(tangents, second, theta, with_ricci=with_ricci)

    if model is None or model.is_flat:
        physical = euclid
    else:
        world_X = X if R is None else X @ R
        g, dg, d2g = metric_jets(model, world_X)
        if R is not None:
            g, dg, d2g = _rotate_jets(g, dg, d2g, R)
        physical = metric_frame(tangents, second, theta, g, dg, d2g, with_ricci=with_ricci)

    if R is not None:
        w, X, tangents, second = (w @ R, X @ R, tangents @ R, second @ R)
        euclid = _rotate_frame_vectors(euclid, R)
        physical = euclid if model is None or model.is_flat else _rotate_frame_vectors(physical, R)

    return SurfaceFrame(
        surface=surface,
        sampling=sampling,
        fields=fields,
        directions=w,
        position=X,
        tangents=tangents,
        second_derivatives=second,
        euclidean=euclid,
        physical=physical,
        weights=sampling.flat_weights,
    )


def _rotate_frame_vectors(frame: MetricFrame, R: np.ndarray) -> MetricFrame:
    g = frame.metric
    dg = frame.metric_derivative
    if g is not None:
        Rt = R.T
        g = np.einsum("ia,jb,nab->nij", Rt, Rt, g)
        dg = np.einsum("ia,jb,kc,nabc->nijk", Rt, Rt, Rt, dg)
    return frame._replace(
        metric=g,
        metric_derivative=dg,
        normal_covector=frame.normal_covector @ R,
        normal=frame.normal @ R,
    )


def frame_euclidean(surface: RadialSurface, grid: Sampling) -> SurfaceFrame:
    return compute_frame(surface, grid, None, with_ricci=False)


def frame_metric(surface: RadialSurface, grid: Sampling, model: MetricModel, with_ricci: bool = True) -> SurfaceFrame:
    return compute_frame(surface, grid, model, with_ricci=with_ricci)


def surface_integral(frame: SurfaceFrame, integrand: np.ndarray, measure: Measure = Measure.EUCLIDEAN) -> float:
    """Σ w·F·dμ の求積値"""
    values = np.broadcast_to(np.asarray(integrand, dtype=float), frame.weights.shape)
    bad = ~np.isfinite(values)
    if bad.any():
        raise NonFiniteIntegrand(int(bad.sum()))
    return float(np.sum(values * frame.measure(measure)))


def _polish_extremum(surface: RadialSurface, start: np.ndarray, sign: float) -> Tuple[np.ndarray, float]:
    # 開始方向の接平面座標で |X| を最適化する
    d0 = start / np.linalg.norm(start)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d0[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d0, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d0, e1)

    def direction(p: np.ndarray) -> np.ndarray:
        d = d0 + p[0] * e1 + p[1] * e2
        return d / np.linalg.norm(d)

    def objective(p: np.ndarray) -> float:
        return sign * float(np.linalg.norm(surface.points_at(direction(p))[0]))

    result = minimize(
        objective, np.zeros(2), method="Nelder-Mead",
        options={
            "xatol": POLISH_TOLERANCE,
            "fatol": 1e-14 * float(np.linalg.norm(surface.points_at(d0)[0])),
            "maxiter": 1000,
            "initial_simplex": 1e-3 * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        },
    )
    best = direction(result.x)
    value = sign * result.fun
    return best, float(value)


def _oversampled_distances(surface: RadialSurface) -> Tuple[np.ndarray, np.ndarray]:
    grid = quadrature_grid(OVERSAMPLING * default_colat(surface.L_max))
    directions = grid.directions
    rho = synthesize_values(surface.coeffs, surface.L_max, grid).reshape(-1)
    X = surface.center + rho[:, None] * directions
    return directions, np.linalg.norm(X, axis=1)


def radii(surface: RadialSurface) -> Tuple[float, float]:
    """原点からの最小・最大距離 (r₀, r₁)"""
    directions, dist = _oversampled_distances(surface)
    _, r0 = _polish_extremum(surface, directions[int(np.argmin(dist))], 1.0)
    _, r1 = _polish_extremum(surface, directions[int(np.argmax(dist))], -1.0)
    return min(r0, float(dist.min())), max(r1, float(dist.max()))


def nearest_direction(surface: RadialSurface) -> Tuple[np.ndarray, float]:
    """原点に最も近い点のパラメータ方向 ω* と r₀"""
    directions, dist = _oversampled_distances(surface)
    best, r0 = _polish_extremum(surface, directions[int(np.argmin(dist))], 1.0)
    return best, r0


class ExpansionResidual(NamedTuple):
    residual: np.ndarray
    sup: float
    bound_density: np.ndarray
    constant: float


def ambient_second_form(frame: MetricFrame, tangents: np.ndarray) -> np.ndarray:
    """A_ab を外部テンソル A_ij = A_ab T^a_i T^b_j として返す"""
    dual = np.einsum("nab,nbi->nai", frame.induced_inv, tangents)
    return np.einsum("nai,nab,nbj->nij", dual, frame.second_form, dual)


def expansion_residual(surface: RadialSurface, grid: Sampling, model: MetricModel) -> ExpansionResidual:
    """H_g - H_e と一次展開の差、およびその比較上界 C(|h||∂h| + |h|²|A|)"""
    frame = compute_frame(surface, grid, model, with_ricci=False)
    n_pts = frame.weights.size
    if model.is_flat:
        zeros = np.zeros(n_pts)
        return ExpansionResidual(zeros, 0.0, zeros.copy(), 0.0)

    h, dh, _ = perturbation_jets(model, frame.position)
    nu = frame.nu_e
    H = frame.H_e
    P = np.eye(3) - np.einsum("ni,nj->nij", nu, nu)
    A = ambient_second_form(frame.euclidean, frame.tangents)

    expansion = (
        -np.einsum("nik,nkl,nlj,nij->n", P, h, P, A)
        + 0.5 * H * np.einsum("ni,nj,nij->n", nu, nu, h)
        - np.einsum("nij,nl,njli->n", P, nu, dh)
        + 0.5 * np.einsum("nij,nl,nijl->n", P, nu, dh)
    )
    residual = (frame.H_g - frame.H_e) - expansion

    h_norm = np.linalg.norm(h.reshape(n_pts, -1), axis=1)
    dh_norm = np.linalg.norm(dh.reshape(n_pts, -1), axis=1)
    A_norm = np.sqrt(frame.euclidean.norm_A2)
    bound = h_norm * dh_norm + h_norm ** 2 * A_norm
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, np.abs(residual) / bound, 0.0)
    return ExpansionResidual(residual, float(np.abs(residual).max()), bound, float(ratio.max()))


def gauss_map_residual(surface: RadialSurface, grid: QuadratureGrid, L_test: Optional[int] = None) -> float:
    """Δ_e ν + |∇ν|² ν - ∇H_e の弱形式残差の最大値

    W_ki = -∫⟨∇ν_k, ∇Y_i⟩ + ∫|A|²ν_k Y_i + ∫H (∇Y_i)_k - ∫H² ν_k Y_i
    """
    L = surface.L_max if L_test is None else L_test
    frame = frame_euclidean(surface, grid)
    ef = frame.euclidean
    Y, Yt, Yp = grid.basis(L)
    dY = np.stack([Yt, Yp], axis=-1)  # (modes, N, 2)

    shape = np.einsum("nab,nbc->nac", ef.second_form, ef.induced_inv)  # A_a^c
    dnu = np.einsum("nac,nci->nai", shape, frame.tangents)  # ∂_a ν
    grad_Y_coef = np.einsum("nab,mnb->mna", ef.induced_inv, dY)  # f^{ab}∂_bY
    grad_Y = np.einsum("mna,nai->mni", grad_Y_coef, frame.tangents)

    dmu = frame.dmu_e
    H = ef.mean_curvature
    W = (
        -np.einsum("mna,nai,n->mi", grad_Y_coef, dnu, dmu)
        + np.einsum("n,ni,mn,n->mi", ef.norm_A2, frame.nu_e, Y, dmu)
        + np.einsum("n,mni,n->mi", H, grad_Y, dmu)
        - np.einsum("n,ni,mn,n->mi", H ** 2, frame.nu_e, Y, dmu)
    )
    return float(np.abs(W).max())


def rotate_surface(surface: RadialSurface, rotation: np.ndarray) -> RadialSurface:
    """曲面を原点回りに回転する: X' = R X"""
    R = np.asarray(rotation, dtype=float)
    return RadialSurface(R @ surface.center, rotate_coefficients(surface.coeffs, surface.L_max, R), surface.L_max)


def _one_sided_distance(a: RadialSurface, b: RadialSurface, grid: QuadratureGrid) -> float:
    rho = synthesize_values(a.coeffs, a.L_max, grid).reshape(-1)
    X = a.center + rho[:, None] * grid.directions
    rel = X - b.center
    dist = np.linalg.norm(rel, axis=1)
    return float(np.abs(dist - b.radius_at(rel / dist[:, None])).max())


def surface_distance(a: RadialSurface, b: RadialSurface) -> float:
    """b の中心からの動径射影による sup 距離 (対称化)"""
    grid = quadrature_grid(2 * max(default_colat(a.L_max), default_colat(b.L_max)))
    return max(_one_sided_distance(a, b, grid), _one_sided_distance(b, a, grid))
