from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Final, List, NamedTuple, Optional, Tuple
import logging
import math

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA
from sklearn.linear_model import LinearRegression

from src.errors import DegenerateFit, EmptyBand, EmptyWindow, NoIntermediateRegion
from src.geometry.metric_models import MetricModel
from src.geometry.spectral import (
    QuadratureGrid,
    Sampling,
    analyze,
    default_colat,
    quadrature_grid,
    stretched_sampling,
    synthesize_fields,
)
from src.geometry.surface_geometry import (
    OVERSAMPLING,
    RadialSurface,
    compute_frame,
    nearest_direction,
    radii,
)
from src.solver.cmc_solver import FoliationRecord


DEGENERATE_RATIO: Final[float] = 1e-8
WINDOW_REFINEMENT: Final[float] = 0.25
TENSION_EXTRA_DEGREE: Final[int] = 8

logger = logging.getLogger(__name__)


class FitKind(str, Enum):
    SPHERE = "sphere"
    PLANE = "plane"


@dataclass
class FitReport:
    """極限形状へのフィット結果

    sphere: center, radius / plane: point, normal, distance (原点からの距離)
    """

    kind: FitKind
    max_deviation: float
    rms_deviation: float
    center: Optional[Tuple[float, float, float]] = None
    radius: Optional[float] = None
    point: Optional[Tuple[float, float, float]] = None
    normal: Optional[Tuple[float, float, float]] = None
    distance: Optional[float] = None
    n_points: int = 0


@dataclass(frozen=True)
class AnnulusSchedule:
    K: float
    s: float
    L: float
    l_n: int
    boundaries: Tuple[float, ...]
    r0: float
    H: float

    @property
    def bands(self) -> List[Tuple[float, float]]:
        return list(zip(self.boundaries[:-1], self.boundaries[1:]))


class EnergyRow(NamedTuple):
    i: int
    r_lo: float
    r_hi: float
    energy: float
    sup_grad: float
    sup_A_scaled: float
    profile_bound: float
    n_nodes: int


@dataclass
class EnergyProfile:
    schedule: AnnulusSchedule
    rows: List[EnergyRow]
    inner_cap: float
    outer_cap: float
    total: float

    @property
    def energies(self) -> np.ndarray:
        return np.array([row.energy for row in self.rows])

    @property
    def additivity_error(self) -> float:
        parts = float(self.energies.sum()) + self.inner_cap + self.outer_cap
        return abs(parts - self.total) / max(abs(self.total), np.finfo(float).tiny)

    def decay_direction(self) -> Optional[str]:
        """帯ごとのエネルギーが内側端から減るなら "inner"、外側端から減るなら "outer" """
        e = self.energies
        if e.size < 2:
            return None
        steps = np.diff(e)
        if np.all(steps < 0):
            return "inner"
        if np.all(steps > 0):
            return "outer"
        return None

    def to_frame(self) -> pd.DataFrame:
        columns = ["i", "r_lo", "r_hi", "energy", "sup_grad", "sup_A_scaled", "profile_bound"]
        return pd.DataFrame([row[:7] for row in self.rows], columns=columns)


class TensionReport(NamedTuple):
    grad_H_e: np.ndarray
    scaled_sup: float
    sup_grad_H_g: Optional[float]


def rescale_surface(surface: RadialSurface, factor: float) -> RadialSurface:
    """λΣ = {λx : x ∈ Σ}"""
    if factor <= 0:
        raise ValueError(f"rescale factor must be positive, got {factor}")
    return RadialSurface(surface.center * factor, surface.coeffs * factor, surface.L_max)


def rescale_metric(model: MetricModel, r: float) -> MetricModel:
    """h^r(x) = r·h(rx)"""
    return model.rescaled(r)


def _oversampled_points(surface: RadialSurface, sampling: Optional[Sampling]) -> np.ndarray:
    sampling = sampling or quadrature_grid(OVERSAMPLING * default_colat(surface.L_max) // 2)
    return compute_frame(surface, sampling, None, with_ricci=False).position


def sphere_fit(surface: RadialSurface, sampling: Optional[Sampling] = None) -> FitReport:
    """|X|² = 2c·X + k の線形最小二乗で球面を当てはめる"""
    points = _oversampled_points(surface, sampling)
    spread = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if spread[-1] <= DEGENERATE_RATIO * spread[0]:
        raise DegenerateFit(f"nodes are nearly coplanar (singular values {spread})")

    reg = LinearRegression().fit(points, np.sum(points ** 2, axis=1))
    center = 0.5 * reg.coef_
    radius_sq = reg.intercept_ + center @ center
    if radius_sq <= 0:
        raise DegenerateFit(f"fitted radius² = {radius_sq:.3e}")
    radius = float(np.sqrt(radius_sq))
    deviation = np.abs(np.linalg.norm(points - center, axis=1) - radius)
    return FitReport(
        kind=FitKind.SPHERE,
        max_deviation=float(deviation.max()),
        rms_deviation=float(np.sqrt(np.mean(deviation ** 2))),
        center=tuple(float(v) for v in center),
        radius=radius,
        n_points=len(points),
    )


def window_sampling(surface: RadialSurface, window_radius: float) -> Sampling:
    """原点に最も近い方向に集中させたサンプリング"""
    direction, _ = nearest_direction(surface)
    scale = min(0.5, WINDOW_REFINEMENT * window_radius / max(surface.mean_radius, window_radius))
    return stretched_sampling(direction, scale)


def plane_fit(
    surface: RadialSurface,
    window_radius: float,
    sampling: Optional[Sampling] = None,
) -> FitReport:
    """|X| ≤ window_radius のノードに平面を当てはめる (PCA の最小分散方向が法線)"""
    sampling = sampling or window_sampling(surface, window_radius)
    frame = compute_frame(surface, sampling, None, with_ricci=False)
    mask = (frame.radius_norm <= window_radius) & (frame.weights > 0)
    points = frame.position[mask]
    if points.shape[0] == 0:
        raise EmptyWindow(window_radius)
    if points.shape[0] < 3:
        raise DegenerateFit(f"only {points.shape[0]} nodes in the window")

    pca = PCA(n_components=3).fit(points)
    if pca.explained_variance_[1] <= DEGENERATE_RATIO * pca.explained_variance_[0]:
        raise DegenerateFit("window nodes are nearly collinear")
    normal = pca.components_[2]
    point = pca.mean_
    deviation = np.abs((points - point) @ normal)
    return FitReport(
        kind=FitKind.PLANE,
        max_deviation=float(deviation.max()),
        rms_deviation=float(np.sqrt(np.mean(deviation ** 2))),
        point=tuple(float(v) for v in point),
        normal=tuple(float(v) for v in normal),
        distance=float(abs(point @ normal)),
        n_points=int(points.shape[0]),
    )


def annulus_schedule_from(r0: float, H: float, K: float, s: float, L: float) -> AnnulusSchedule:
    """境界 Kr0·e^{iL} (i < l_n) と最後の境界 s/H からなる帯の列"""
    if r0 <= 0 or H <= 0 or K <= 0 or s <= 0 or L <= 0:
        raise ValueError("r0, H, K, s and L must all be positive")
    inner = K * r0
    outer = s / H
    l_n = math.floor(math.log(outer / inner) / L) if outer > inner else 0
    if l_n < 1:
        raise NoIntermediateRegion(l_n)
    boundaries = tuple(inner * math.exp(i * L) for i in range(l_n)) + (outer,)
    return AnnulusSchedule(K=K, s=s, L=L, l_n=l_n, boundaries=boundaries, r0=r0, H=H)


def annulus_schedule(
    surface: RadialSurface,
    K: float,
    s: float,
    L: float,
    model: Optional[MetricModel] = None,
    sampling: Optional[Sampling] = None,
) -> AnnulusSchedule:
    """曲面の r0 と平均曲率 H から帯を決める (model が無ければ H_e を使う)"""
    r0, _ = radii(surface)
    sampling = sampling or quadrature_grid(default_colat(surface.L_max))
    frame = compute_frame(surface, sampling, model, with_ricci=False)
    H = float(np.sum(frame.H_g * frame.dmu_g) / np.sum(frame.dmu_g))
    return annulus_schedule_from(r0, H, K, s, L)


def gauss_map_energy(
    surface: RadialSurface,
    schedule: AnnulusSchedule,
    sampling: Optional[Sampling] = None,
    strict: bool = False,
) -> EnergyProfile:
    """帯ごとの ∫|∇ν|² dμ_e と sup |∇ν|, sup |x||A|

    平坦な周囲空間では |∇ν| = |A_e|。strict=True のとき空の帯は EmptyBand。
    """
    sampling = sampling or quadrature_grid(default_colat(surface.L_max))
    frame = compute_frame(surface, sampling, None, with_ricci=False)
    A2 = frame.euclidean.norm_A2
    density = A2 * frame.dmu_e
    norm = frame.radius_norm
    grad = np.sqrt(A2)
    weighted = frame.weights > 0
    b = schedule.boundaries

    rows = []
    for i, (lo, hi) in enumerate(schedule.bands, start=1):
        mask = (norm >= lo) & (norm < hi) if i < schedule.l_n else (norm >= lo) & (norm <= hi)
        count = int(np.sum(mask & weighted))
        if count == 0 and strict:
            raise EmptyBand(f"band {i} [{lo:.6g}, {hi:.6g})")
        profile = math.exp(-i * schedule.L / 2) + math.exp(-(schedule.l_n - i) * schedule.L / 2)
        rows.append(
            EnergyRow(
                i=i,
                r_lo=float(lo),
                r_hi=float(hi),
                energy=float(density[mask].sum()),
                sup_grad=float(grad[mask].max()) if mask.any() else 0.0,
                sup_A_scaled=float((norm * grad)[mask].max()) if mask.any() else 0.0,
                profile_bound=profile,
                n_nodes=count,
            )
        )
    inner_cap = float(density[norm < b[0]].sum())
    outer_cap = float(density[norm > b[-1]].sum())
    profile = EnergyProfile(schedule, rows, inner_cap, outer_cap, float(density.sum()))
    logger.debug("Gauss map energies %s (caps %.3e, %.3e)", profile.energies, inner_cap, outer_cap)
    return profile


def _tangential_gradient(frame, values: np.ndarray, L: int, grid: QuadratureGrid) -> np.ndarray:
    coeffs = analyze(values, L, grid)
    fields = synthesize_fields(coeffs, L, grid)
    d = np.stack([fields.d_theta.reshape(-1), fields.d_phi.reshape(-1)], axis=1)
    return np.sqrt(np.maximum(np.einsum("na,nab,nb->n", d, frame.euclidean.induced_inv, d), 0.0))


def tension_scan(
    surface: RadialSurface,
    model: Optional[MetricModel] = None,
    grid: Optional[QuadratureGrid] = None,
) -> TensionReport:
    """|∇_Σ H_e| をスペクトル微分で求め、sup |x|³|∇_Σ H_e| を返す

    model を与えると同じ方法で |∇_Σ H_g| の sup も返す (CMC なら ≈ 0)。
    """
    L = surface.L_max + TENSION_EXTRA_DEGREE
    grid = grid or quadrature_grid(default_colat(L))
    L = min(L, grid.n_colat - 1)
    frame = compute_frame(surface, grid, model, with_ricci=False)
    grad_e = _tangential_gradient(frame, frame.H_e, L, grid)
    sup_g = None
    if model is not None:
        sup_g = float(_tangential_gradient(frame, frame.H_g, L, grid).max())
    return TensionReport(grad_e, float(np.max(frame.radius_norm ** 3 * grad_e)), sup_g)


def blowdown_chain(record: FoliationRecord) -> pd.DataFrame:
    """各葉を H/2 倍して球面フィットした半径・中心・偏差の表"""
    rows = []
    for entry in record.entries:
        fit = sphere_fit(rescale_surface(entry.surface, 0.5 * entry.H))
        rows.append(
            {
                "H": entry.H,
                "radius": fit.radius,
                "center_norm": float(np.linalg.norm(fit.center)),
                "max_deviation": fit.max_deviation,
            }
        )
    return pd.DataFrame(rows, columns=["H", "radius", "center_norm", "max_deviation"])
