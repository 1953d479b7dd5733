from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Final, List, NamedTuple, Optional, Sequence, Tuple
import logging
import warnings

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.special import roots_legendre
from sklearn.linear_model import LinearRegression

from src.errors import (
    EmptyBand,
    InvalidScales,
    RadiiTooSmall,
    RTViolation,
    TailEstimateDominates,
    ZeroMass,
)
from src.geometry.metric_models import (
    MetricModel,
    linearized_scalar,
    parity_decompose,
    perturbation_jets,
)
from src.geometry.spectral import (
    QuadratureGrid,
    Sampling,
    default_colat,
    quadrature_grid,
    stretched_sampling,
)
from src.geometry.surface_geometry import (
    Measure,
    RadialSurface,
    SurfaceFrame,
    compute_frame,
    radii,
    surface_integral,
)


DEFAULT_FLUX_COLAT: Final[int] = 64
DEFAULT_TAIL_COLAT: Final[int] = 24
DEFAULT_RADIAL_NODES: Final[int] = 64
TAIL_CUTOFF_FACTOR: Final[float] = 1e6
TAIL_SHARE_LIMIT: Final[float] = 0.1
ZERO_MASS: Final[float] = 1e-12
# RT 判定: |h_odd|·R² が半径とともにこの倍率以上増えたら違反
RT_GROWTH_LIMIT: Final[float] = 2.0
_PROBE_DIRECTIONS: Final[np.ndarray] = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1], [1, -1, 2]], dtype=float
)

logger = logging.getLogger(__name__)


@dataclass
class MassReport:
    radii_values: List[Tuple[float, float]]
    extrapolated_mass: float
    extrapolation_residual: float
    measure: str = Measure.EUCLIDEAN.value

    def to_dict(self) -> dict:
        return asdict(self)


class CenterOfMass(NamedTuple):
    center: np.ndarray
    residual: float
    per_radius: List[Tuple[float, Tuple[float, float, float]]]
    mass: float


@dataclass
class QTReport:
    total: float
    b: Tuple[float, float, float]
    inner_part: float
    outer_part: float
    intermediate_part: float
    K: float
    s: float
    r0: float
    r1: float
    H: float

    def to_dict(self) -> dict:
        return asdict(self)


class TailReport(NamedTuple):
    value: float
    tail_estimate: float
    tail_share: float


@dataclass
class CertificateReport:
    int_H2_dmu: float
    int_Aring2_dmu: float
    sup_scaled_Aring: float
    H2_area: float
    diam_H_product: float
    int_He2_dmu_e: float = field(default=0.0)

    def to_dict(self) -> dict:
        return asdict(self)


class ClosureReport(NamedTuple):
    surface_flux: float
    sphere_flux: float
    shell_integral: float
    relative_error: float


def _unit(b: Sequence[float]) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    if b.shape != (3,) or abs(np.linalg.norm(b) - 1.0) > 1e-12:
        raise ValueError(f"b must be a unit 3-vector, got {b}")
    return b


def _check_radii(radii_list: Sequence[float], minimum: int) -> np.ndarray:
    values = np.asarray(radii_list, dtype=float)
    if values.ndim != 1 or values.size < minimum:
        raise RadiiTooSmall(f"{values.size} radii given, at least {minimum} required")
    if np.any(np.diff(values) <= 0) or np.any(values <= 0):
        raise RadiiTooSmall("radii must be positive and strictly increasing")
    return values


def _extrapolate(radii_values: np.ndarray, estimates: np.ndarray) -> Tuple[np.ndarray, float]:
    """estimate(R) = a + c/R の最小二乗。切片と残差の RMS を返す"""
    x = (1.0 / radii_values)[:, None]
    reg = LinearRegression().fit(x, estimates)
    residual = estimates - reg.predict(x)
    return np.atleast_1d(reg.intercept_), float(np.sqrt(np.mean(residual ** 2)))


def _sphere_frame(model: MetricModel, R: float, n_colat: int, measure: Measure) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """座標球面 |x| = R 上の点・法線・測度"""
    grid = quadrature_grid(n_colat)
    sphere = RadialSurface.sphere(R)
    model.check_valid(R * grid.directions)
    frame = compute_frame(sphere, grid, None if measure is Measure.EUCLIDEAN else model, with_ricci=False)
    nu = frame.nu_e if measure is Measure.EUCLIDEAN else frame.nu_g
    return frame.position, nu, frame.measure(measure)


def adm_mass(
    model: MetricModel,
    radii_list: Sequence[float],
    n_colat: int = DEFAULT_FLUX_COLAT,
    measure: Measure = Measure.EUCLIDEAN,
) -> MassReport:
    """座標球面上のフラックス (h_ij,j - h_jj,i)ν^i / 16π を半径ごとに計算し R→∞ へ外挿する"""
    values = _check_radii(radii_list, 3)
    measure = Measure(measure)
    estimates = []
    for R in values:
        X, nu, dmu = _sphere_frame(model, float(R), n_colat, measure)
        _, dh, _ = perturbation_jets(model, X)
        density = np.einsum("nijj,ni->n", dh, nu) - np.einsum("njji,ni->n", dh, nu)
        estimates.append(float(np.sum(density * dmu)) / (16.0 * np.pi))
    estimates = np.array(estimates)
    intercept, residual = _extrapolate(values, estimates)
    logger.debug("ADM mass estimates %s -> %.12g", estimates, intercept[0])
    return MassReport(
        radii_values=[(float(R), float(m)) for R, m in zip(values, estimates)],
        extrapolated_mass=float(intercept[0]),
        extrapolation_residual=residual,
        measure=measure.value,
    )


def _rt_check(model: MetricModel, radii_values: np.ndarray) -> None:
    directions = _PROBE_DIRECTIONS / np.linalg.norm(_PROBE_DIRECTIONS, axis=1, keepdims=True)
    scaled = []
    for R in (radii_values[0], radii_values[-1]):
        odd = max(np.abs(parity_decompose(model, R * d).odd_part).max() for d in directions)
        scaled.append(odd * R ** 2)
    if scaled[0] > 0 and scaled[1] > RT_GROWTH_LIMIT * scaled[0]:
        message = f"odd part of h decays slower than |x|^-2 ({scaled[0]:.3e} -> {scaled[1]:.3e})"
        logger.warning("RT parity violation: %s", message)
        warnings.warn(message, RTViolation, stacklevel=3)


def center_of_mass(
    model: MetricModel,
    radii_list: Sequence[float],
    n_colat: int = DEFAULT_FLUX_COLAT,
) -> CenterOfMass:
    """重心積分 ∫x^α(h_ij,i - h_ii,j)ν^j - ∫(h_iα ν^i - h_ii ν^α) を 16πm で割り外挿する"""
    values = _check_radii(radii_list, 3)
    mass = adm_mass(model, values, n_colat=n_colat).extrapolated_mass
    if abs(mass) < ZERO_MASS:
        raise ZeroMass()
    _rt_check(model, values)

    per_radius = []
    for R in values:
        X, nu, dmu = _sphere_frame(model, float(R), n_colat, Measure.EUCLIDEAN)
        h, dh, _ = perturbation_jets(model, X)
        flux = np.einsum("niji,nj->n", dh, nu) - np.einsum("niij,nj->n", dh, nu)
        trace = np.einsum("nii->n", h)
        first = np.einsum("na,n,n->a", X, flux, dmu)
        second = np.einsum("nia,ni,n->a", h, nu, dmu) - np.einsum("n,na,n->a", trace, nu, dmu)
        per_radius.append((first - second) / (16.0 * np.pi * mass))
    estimates = np.array(per_radius)
    intercept, residual = _extrapolate(values, estimates)
    return CenterOfMass(
        center=intercept,
        residual=residual,
        per_radius=[(float(R), tuple(float(v) for v in c)) for R, c in zip(values, estimates)],
        mass=mass,
    )


def _flux_density(model: MetricModel, frame: SurfaceFrame) -> np.ndarray:
    _, dh, _ = perturbation_jets(model, frame.position)
    nu = frame.nu_e
    return -0.5 * np.einsum("nili,nl->n", dh, nu) + 0.5 * np.einsum("niil,nl->n", dh, nu)


def mass_flux_on_surface(
    surface: RadialSurface,
    model: MetricModel,
    sampling: Optional[Sampling] = None,
) -> float:
    """∫(-½ν^l ∂_i h_il + ½ν^l ∂_l h_ii) dμ_e (Euclid 法線と測度)"""
    sampling = sampling or quadrature_grid(max(default_colat(surface.L_max), 2 * surface.L_max + 8))
    frame = compute_frame(surface, sampling, None, with_ricci=False)
    return surface_integral(frame, _flux_density(model, frame), Measure.EUCLIDEAN)


def mass_flux_on_sphere(
    model: MetricModel,
    r: float,
    n_colat: int = DEFAULT_FLUX_COLAT,
) -> float:
    return mass_flux_on_surface(RadialSurface.sphere(r), model, quadrature_grid(n_colat))


def _exit_distance(center: np.ndarray, directions: np.ndarray, r: float) -> np.ndarray:
    """c + tω が |x| = r に達する t > 0"""
    cw = directions @ center
    return -cw + np.sqrt(cw ** 2 - center @ center + r ** 2)


def divergence_closure(
    surface: RadialSurface,
    model: MetricModel,
    r: float,
    n_colat: Optional[int] = None,
    n_radial: int = DEFAULT_RADIAL_NODES,
) -> ClosureReport:
    """flux(Σ) - flux(∂B_r) と ½∫_shell (h_il,il - h_ii,ll) dv の比較

    殻の体積積分は Σ の中心から出る射線上の Gauss-Legendre 求積で行う。
    """
    n_colat = n_colat or max(default_colat(surface.L_max), 2 * surface.L_max + 8)
    grid = quadrature_grid(n_colat)
    directions = grid.directions
    inner = surface.radius_at(directions)
    outer = _exit_distance(surface.center, directions, r)
    if np.any(outer <= inner):
        raise RadiiTooSmall(f"surface is not contained in the sphere |x| = {r}")

    x, w = roots_legendre(n_radial)
    half = 0.5 * (outer - inner)
    t = inner[:, None] + half[:, None] * (x[None, :] + 1.0)  # (N, n_radial)
    points = surface.center + t[..., None] * directions[:, None, :]
    _, _, d2h = perturbation_jets(model, points.reshape(-1, 3))
    density = linearized_scalar(d2h).reshape(t.shape)
    radial = np.sum(density * t ** 2 * w[None, :], axis=1) * half
    shell = float(np.sum(radial * grid.flat_weights))

    surface_flux = mass_flux_on_surface(surface, model, grid)
    sphere_flux = mass_flux_on_sphere(model, r, n_colat)
    difference = surface_flux - sphere_flux
    expected = 0.5 * shell
    scale = max(abs(expected), abs(difference), np.finfo(float).tiny)
    return ClosureReport(surface_flux, sphere_flux, shell, abs(difference - expected) / scale)


def _default_sampling(surface: RadialSurface) -> QuadratureGrid:
    return quadrature_grid(max(default_colat(surface.L_max), 2 * surface.L_max + 8))


def qt_integral(
    surface: RadialSurface,
    model: MetricModel,
    b: Sequence[float],
    sampling: Optional[Sampling] = None,
) -> float:
    """∫(H_g - H_e)⟨ν_e, b⟩ dμ_e"""
    b = _unit(b)
    frame = compute_frame(surface, sampling or _default_sampling(surface), model, with_ricci=False)
    return surface_integral(frame, (frame.H_g - frame.H_e) * (frame.nu_e @ b), Measure.EUCLIDEAN)


def qt_decomposition(
    surface: RadialSurface,
    model: MetricModel,
    b: Sequence[float],
    K: float,
    s: float,
    sampling: Optional[Sampling] = None,
    allow_overlap: bool = False,
) -> QTReport:
    """B_{Kr0} の内側、B_{s/H} の外側、その中間の三領域に分けた積分

    各ノードは |X| によりちょうど一つの領域に割り当てる。
    allow_overlap=True のとき Kr0 ≥ s/H なら分解せず、各部分を NaN として全体だけ返す。
    """
    b = _unit(b)
    frame = compute_frame(surface, sampling or _default_sampling(surface), model, with_ricci=False)
    r0, r1 = radii(surface)
    H = float(np.sum(frame.H_g * frame.dmu_g) / np.sum(frame.dmu_g))
    integrand = (frame.H_g - frame.H_e) * (frame.nu_e @ b) * frame.dmu_e
    inner_radius = K * r0
    outer_radius = s / H
    if not inner_radius < outer_radius:
        if not allow_overlap:
            raise InvalidScales(inner_radius, outer_radius)
        logger.warning("QT decomposition skipped: K*r0=%.6g >= s/H=%.6g", inner_radius, outer_radius)
        nan = float("nan")
        return QTReport(float(np.sum(integrand)), tuple(float(v) for v in b), nan, nan, nan,
                        float(K), float(s), r0, r1, H)

    norm = frame.radius_norm
    weighted = frame.weights > 0
    masks = {
        "inner": norm < inner_radius,
        "outer": norm >= outer_radius,
    }
    masks["intermediate"] = ~(masks["inner"] | masks["outer"])
    for name, mask in masks.items():
        if not np.any(mask & weighted):
            raise EmptyBand(name)

    parts = {name: float(np.sum(integrand[mask])) for name, mask in masks.items()}
    return QTReport(
        total=float(np.sum(integrand)),
        b=tuple(float(v) for v in b),
        inner_part=parts["inner"],
        outer_part=parts["outer"],
        intermediate_part=parts["intermediate"],
        K=float(K),
        s=float(s),
        r0=r0,
        r1=r1,
        H=H,
    )


def off_center_sphere(R: float, r0: float, axis: Sequence[float] = (1.0, 0.0, 0.0)) -> RadialSurface:
    """半径 R、中心 (R - r0)·axis の球面 (原点に最も近い点までの距離は r0)"""
    axis = _unit(axis)
    return RadialSurface.sphere(R, center=(R - r0) * axis)


def family_sampling(R: float, r0: float, axis: Sequence[float] = (1.0, 0.0, 0.0), refinement: float = 0.5) -> Sampling:
    """最近点 -axis 方向に集中させたサンプリング"""
    scale = min(refinement * r0 / R, 0.5)
    return stretched_sampling(-np.asarray(axis, dtype=float), scale)


def qt_scan_family(
    model: MetricModel,
    R_list: Sequence[float],
    r0: float = 10.0,
    K: float = 10.0,
    s: float = 0.1,
    axis: Sequence[float] = (1.0, 0.0, 0.0),
) -> List[QTReport]:
    """中心をずらした球面族の QT 積分とその分解 (b = -axis)"""
    b = -_unit(axis)
    reports = []
    for R in R_list:
        surface = off_center_sphere(float(R), r0, axis)
        report = qt_decomposition(surface, model, b, K, s, family_sampling(float(R), r0, axis), allow_overlap=True)
        logger.info("QT family R=%.6g: total=%.8g inner=%.8g outer=%.8g intermediate=%.8g",
                    R, report.total, report.inner_part, report.outer_part, report.intermediate_part)
        reports.append(report)
    return reports


def _shell_density(model: MetricModel, t: np.ndarray, grid: QuadratureGrid) -> np.ndarray:
    """各半径 t での ∫_{S²}|h_ij,ij - h_ii,jj| t² dω"""
    points = t[:, None, None] * grid.directions[None, :, :]
    _, _, d2h = perturbation_jets(model, points.reshape(-1, 3))
    density = np.abs(linearized_scalar(d2h)).reshape(t.size, -1)
    return (density @ grid.flat_weights) * t ** 2


def mass_tail_report(
    model: MetricModel,
    r: float,
    n_colat: int = DEFAULT_TAIL_COLAT,
    n_radial: int = DEFAULT_RADIAL_NODES,
) -> TailReport:
    """F(r) = ∫_{|x|>r} |h_ij,ij - h_ii,jj| dv_e

    u = 1/t の Gauss-Legendre で r から R_∞ = 10⁶·max(m, 1) まで積分し、
    その先はべき乗則の外挿で補う。
    """
    if model.is_flat:
        return TailReport(0.0, 0.0, 0.0)
    grid = quadrature_grid(n_colat)
    model.check_valid(r * grid.directions)
    cutoff = TAIL_CUTOFF_FACTOR * max(abs(model.mass), 1.0)
    if cutoff <= r:
        raise RadiiTooSmall(f"r={r} lies beyond the tail cutoff {cutoff}")

    x, w = roots_legendre(n_radial)
    u_lo, u_hi = 1.0 / cutoff, 1.0 / r
    half = 0.5 * (u_hi - u_lo)
    u = u_lo + half * (x + 1.0)
    t = 1.0 / u
    # dt = -du/u²
    value = float(np.sum(_shell_density(model, t, grid) * w / u ** 2) * half)

    ends = _shell_density(model, np.array([0.5 * cutoff, cutoff]), grid)
    if ends[1] <= 0.0:
        tail = 0.0
    else:
        power = np.log(ends[0] / ends[1]) / np.log(2.0)
        tail = float(ends[1] * cutoff / (power - 1.0)) if power > 1.0 else float("inf")
    total = value + tail
    share = tail / total if total > 0 else 0.0
    if share > TAIL_SHARE_LIMIT:
        message = f"tail estimate is {share:.1%} of F({r})"
        logger.warning("Mass tail: %s", message)
        warnings.warn(message, TailEstimateDominates, stacklevel=2)
    return TailReport(total, tail, share)


def mass_tail(model: MetricModel, r: float, **kwargs) -> float:
    return mass_tail_report(model, r, **kwargs).value


def _diameter(points: np.ndarray) -> float:
    try:
        hull = points[ConvexHull(points).vertices]
    except QhullError:
        hull = points
    return float(pdist(hull).max())


def curvature_certificates(
    surface: RadialSurface,
    model: MetricModel,
    sampling: Optional[Sampling] = None,
) -> CertificateReport:
    """∫H²dμ, ∫|Å|²dμ, sup|x||Å|, H²|Σ|, diam·H"""
    frame = compute_frame(surface, sampling or _default_sampling(surface), model, with_ricci=False)
    pf = frame.physical
    area = float(np.sum(frame.dmu_g))
    H = float(np.sum(pf.mean_curvature * frame.dmu_g) / area)
    return CertificateReport(
        int_H2_dmu=surface_integral(frame, pf.mean_curvature ** 2, Measure.PHYSICAL),
        int_Aring2_dmu=surface_integral(frame, pf.norm_Aring2, Measure.PHYSICAL),
        sup_scaled_Aring=float(np.max(frame.radius_norm * np.sqrt(pf.norm_Aring2))),
        H2_area=H ** 2 * area,
        diam_H_product=_diameter(frame.position) * abs(H),
        int_He2_dmu_e=surface_integral(frame, frame.H_e ** 2, Measure.EUCLIDEAN),
    )
