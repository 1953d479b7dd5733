from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
from enum import Enum
from typing import Final, List, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from src.errors import (
    DegenerateSurface,
    InvalidTerm,
    JacobianSingular,
    LabError,
    LeftValidityRegion,
    NoConvergence,
    NotMeanZero,
    PointInsideCore,
)
from src.geometry.metric_models import MetricModel
from src.geometry.spectral import (
    QuadratureGrid,
    default_colat,
    mode_list,
    n_modes,
    quadrature_grid,
)
from src.geometry.surface_geometry import (
    RadialSurface,
    SurfaceFrame,
    compute_frame,
    radii,
)


MAX_HALVINGS: Final[int] = 12
SINGULAR_EIGENVALUE: Final[float] = 1e-12
MEAN_ZERO_TOLERANCE: Final[float] = 1e-8
FD_STEP: Final[float] = 1e-7
# l=1 係数と中心移動の換算 √(3/4π)
DIPOLE_SHIFT: Final[float] = float(np.sqrt(3.0 / (4.0 * np.pi)))

logger = logging.getLogger(__name__)


class JacobianMode(str, Enum):
    ANALYTIC = "analytic_jacobi"
    FINITE_DIFFERENCE = "finite_difference"


@dataclass(frozen=True)
class SolverOptions:
    """Newton 法の設定"""

    tol_residual: float = 1e-10
    max_newton_iters: int = 30
    damping: float = 1.0
    L_max: int = 16
    jacobian_mode: JacobianMode = JacobianMode.ANALYTIC
    n_colat: Optional[int] = None
    freeze_center: Optional[bool] = None

    def __post_init__(self) -> None:
        if self.tol_residual <= 0:
            raise ValueError(f"tol_residual must be positive, got {self.tol_residual}")
        if self.L_max < 2:
            raise ValueError(f"L_max must be ≥ 2, got {self.L_max}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be ≥ 1")
        object.__setattr__(self, "jacobian_mode", JacobianMode(self.jacobian_mode))

    @property
    def grid(self) -> QuadratureGrid:
        n_colat = self.n_colat or default_colat(self.L_max)
        return quadrature_grid(max(n_colat, self.L_max + 1))

    def center_frozen(self, model: MetricModel) -> bool:
        return model.is_flat if self.freeze_center is None else self.freeze_center


class SolveResult(NamedTuple):
    surface: RadialSurface
    iterations: int
    residual: float
    lowest_eigenvalue: Optional[float]


@dataclass
class FoliationEntry:
    H: float
    surface: RadialSurface
    r0: float
    r1: float
    center: Tuple[float, float, float]
    lowest_meanzero_eigenvalue: float
    newton_iters: int
    residual: float


@dataclass
class FoliationRecord:
    """H の減少順に並んだ CMC 葉の記録"""

    entries: List[FoliationEntry] = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def complete(self) -> bool:
        return self.failure is None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "H": [e.H for e in self.entries],
                "r0": [e.r0 for e in self.entries],
                "r1": [e.r1 for e in self.entries],
                "cx": [e.center[0] for e in self.entries],
                "cy": [e.center[1] for e in self.entries],
                "cz": [e.center[2] for e in self.entries],
                "lambda1": [e.lowest_meanzero_eigenvalue for e in self.entries],
                "iters": [e.newton_iters for e in self.entries],
                "residual": [e.residual for e in self.entries],
            }
        )


@dataclass
class SpectrumReport:
    """平均ゼロ関数上の Jacobi 作用素の最小固有値たち"""

    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray  # (k, n_modes) の係数
    L_max: int

    @property
    def lowest(self) -> float:
        return float(self.eigenvalues[0])


def _free_modes(L: int) -> np.ndarray:
    return np.array([i for i, (l, _) in enumerate(mode_list(L)) if l != 1], dtype=int)


def _dipole_rows(L: int) -> np.ndarray:
    return np.array([i for i, (l, _) in enumerate(mode_list(L)) if l == 1], dtype=int)


def _absorb_dipole(surface: RadialSurface) -> RadialSurface:
    """ρ の l=1 成分を中心移動に置き換える (一次近似で同じ曲面)"""
    coeffs = np.array(surface.coeffs)
    # Y_11 ∝ x, Y_1-1 ∝ y, Y_10 ∝ z
    shift = DIPOLE_SHIFT * np.array([coeffs[3], coeffs[1], coeffs[2]])
    coeffs[1:4] = 0.0
    return RadialSurface(surface.center + shift, coeffs, surface.L_max)


def _frame(surface: RadialSurface, grid: QuadratureGrid, model: MetricModel) -> SurfaceFrame:
    return compute_frame(surface, grid, model, with_ricci=True)


def mean_curvature_residual(
    surface: RadialSurface,
    model: MetricModel,
    H_target: float,
    grid: Optional[QuadratureGrid] = None,
) -> np.ndarray:
    """ノードごとの H_g - H_target"""
    grid = grid or quadrature_grid(default_colat(surface.L_max))
    frame = compute_frame(surface, grid, model, with_ricci=False)
    return frame.H_g - H_target


def jacobi_matrices(frame: SurfaceFrame, L: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Galerkin 行列 K = ∫∇Y·∇Y - V·YY dμ, M = ∫YY dμ と平均ベクトル ∫Y dμ"""
    grid = frame.sampling
    Y, Yt, Yp = grid.basis(L)
    pf = frame.physical
    mu = frame.dmu_g
    V = pf.norm_A2 + pf.ricci_nn
    dY = (Yt, Yp)
    K = np.zeros((Y.shape[0], Y.shape[0]))
    for a in range(2):
        for b in range(2):
            K += (dY[a] * (mu * pf.induced_inv[:, a, b])) @ dY[b].T
    K -= (Y * (mu * V)) @ Y.T
    M = (Y * mu) @ Y.T
    K = 0.5 * (K + K.T)
    M = 0.5 * (M + M.T)
    return K, M, Y @ mu


def _mean_zero_basis(mean: np.ndarray) -> np.ndarray:
    return linalg.null_space(mean[None, :])


def _surface_grid(surface: RadialSurface, grid: Optional[QuadratureGrid]) -> QuadratureGrid:
    return grid or quadrature_grid(default_colat(surface.L_max))


def stability_spectrum(
    surface: RadialSurface,
    model: MetricModel,
    k: int = 4,
    grid: Optional[QuadratureGrid] = None,
) -> SpectrumReport:
    """平均ゼロ部分空間上の Jacobi 作用素の k 個の最小固有値

    Parameters
    ----------
    surface : RadialSurface
        収束した CMC 曲面
    model : MetricModel
        計量モデル
    k : int
        求める固有値の数

    Returns
    -------
    SpectrumReport
        昇順の固有値と L²(dμ_g) 正規直交な固有関数係数 (k は平均ゼロ部分空間の次元で打ち切る)
    """
    if k < 1:
        raise ValueError(f"k must be ≥ 1, got {k}")
    frame = _frame(surface, _surface_grid(surface, grid), model)
    K, M, mean = jacobi_matrices(frame, surface.L_max)
    Z = _mean_zero_basis(mean)
    k = min(k, Z.shape[1])
    values, vectors = linalg.eigh(Z.T @ K @ Z, Z.T @ M @ Z, subset_by_index=[0, k - 1])
    return SpectrumReport(eigenvalues=values, eigenfunctions=(Z @ vectors).T, L_max=surface.L_max)


def jacobi_apply(
    surface: RadialSurface,
    model: MetricModel,
    f: np.ndarray,
    project: bool = False,
    grid: Optional[QuadratureGrid] = None,
) -> np.ndarray:
    """-Δf - (|A|² + Ric(ν,ν)) f を係数空間で返す (Galerkin 射影 M⁻¹K f)"""
    f = np.asarray(f, dtype=float)
    frame = _frame(surface, _surface_grid(surface, grid), model)
    K, M, mean = jacobi_matrices(frame, surface.L_max)
    area = float(mean[0] * np.sqrt(4.0 * np.pi))
    integral = float(mean @ f)
    l2 = float(np.sqrt(max(f @ M @ f, 0.0)))
    if abs(integral) > MEAN_ZERO_TOLERANCE * max(l2 * np.sqrt(area), np.finfo(float).tiny):
        if not project:
            raise NotMeanZero(integral)
        constant = np.zeros_like(f)
        constant[0] = np.sqrt(4.0 * np.pi)
        f = f - (integral / area) * constant
    return linalg.solve(M, K @ f, assume_a="pos")


def stability_inequality_check(
    surface: RadialSurface,
    model: MetricModel,
    n_tests: int = 50,
    seed: int = 0,
    grid: Optional[QuadratureGrid] = None,
) -> float:
    """ランダムな平均ゼロ関数に対する ∫|∇f|² - ∫(|A|²+Ric)f² の最小値 (‖f‖ = 1)"""
    frame = _frame(surface, _surface_grid(surface, grid), model)
    K, M, mean = jacobi_matrices(frame, surface.L_max)
    Z = _mean_zero_basis(mean)
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n_tests):
        f = Z @ rng.standard_normal(Z.shape[1])
        f /= np.sqrt(f @ M @ f)
        worst = min(worst, float(f @ K @ f))
    return worst


class _NewtonState(NamedTuple):
    surface: RadialSurface
    frame: SurfaceFrame
    residual: np.ndarray
    nodal: np.ndarray


class _Newton:
    """中心と l≠1 係数を未知数とする Newton 反復"""

    def __init__(self, model: MetricModel, H_target: float, opts: SolverOptions) -> None:
        self.model = model
        self.H_target = H_target
        self.opts = opts
        self.grid = opts.grid
        self.L = opts.L_max
        self.frozen = opts.center_frozen(model)
        self.free = _free_modes(self.L)
        rows = np.arange(n_modes(self.L))
        self.rows = self.free if self.frozen else rows

    def pack(self, surface: RadialSurface) -> np.ndarray:
        parts = [] if self.frozen else [surface.center]
        parts.append(surface.coeffs[self.free])
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray, template: RadialSurface) -> RadialSurface:
        coeffs = np.zeros(n_modes(self.L))
        if self.frozen:
            coeffs[self.free] = x
            return RadialSurface(template.center, coeffs, self.L)
        coeffs[self.free] = x[3:]
        return RadialSurface(x[:3], coeffs, self.L)

    def evaluate(self, surface: RadialSurface) -> _NewtonState:
        frame = _frame(surface, self.grid, self.model)
        nodal = frame.H_g - self.H_target
        Y, _, _ = self.grid.basis(self.L)
        residual = Y @ (frame.dmu_g * nodal)
        return _NewtonState(surface, frame, residual[self.rows], nodal)

    def jacobian(self, state: _NewtonState) -> np.ndarray:
        if self.opts.jacobian_mode is JacobianMode.FINITE_DIFFERENCE:
            return self._fd_jacobian(state)
        return self._analytic_jacobian(state)

    def _fd_jacobian(self, state: _NewtonState) -> np.ndarray:
        x0 = self.pack(state.surface)
        scale = max(abs(state.surface.mean_radius), 1.0)
        columns = []
        for j in range(x0.size):
            step = FD_STEP * scale
            x = x0.copy()
            x[j] += step
            trial = self.evaluate(self.unpack(x, state.surface))
            columns.append((trial.residual - state.residual) / step)
        return np.column_stack(columns)

    def _analytic_jacobian(self, state: _NewtonState) -> np.ndarray:
        # 弱形式: ∫∇Y_i·∇ψ - VY_iψ + (H-H_t)H Y_iψ - (H-H_t)⟨∇Y_i, V_T⟩ dμ
        frame = state.frame
        pf = frame.physical
        grid = self.grid
        Y, Yt, Yp = grid.basis(self.L)
        dY = (Yt, Yp)
        mu = frame.dmu_g
        H = pf.mean_curvature
        defect = state.nodal
        V = pf.norm_A2 + pf.ricci_nn
        finv = pf.induced_inv
        T = frame.tangents
        XX = frame.second_derivatives
        omega = frame.directions

        n_pts = mu.size
        g = pf.metric if pf.metric is not None else np.broadcast_to(np.eye(3), (n_pts, 3, 3))
        dg = pf.metric_derivative if pf.metric_derivative is not None else np.zeros((n_pts, 3, 3, 3))
        ginv = np.linalg.inv(g)

        n = np.cross(T[:, 0], T[:, 1])
        norm = pf.normal_norm
        n_hat = pf.normal_covector
        dn = np.stack(
            [np.cross(XX[:, 0, a], T[:, 1]) + np.cross(T[:, 0], XX[:, 1, a]) for a in range(2)], axis=1
        )
        dg_a = np.einsum("npqm,nam->napq", dg, T)
        dginv_a = -np.einsum("nip,napq,nqj->naij", ginv, dg_a, ginv)
        dnorm2 = (np.einsum("naij,ni,nj->na", dginv_a, n, n)
                  + 2.0 * np.einsum("nij,ni,naj->na", ginv, n, dn))
        dn_hat = dn / norm[:, None, None] - n[:, None, :] * (dnorm2 / (2.0 * norm[:, None] ** 3))[:, :, None]

        theta = grid.theta_nodes
        phi = np.tile(grid.phi, grid.theta.size)
        omega_a = np.stack(
            [
                np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=1),
                np.stack([-np.sin(theta) * np.sin(phi), np.sin(theta) * np.cos(phi), np.zeros_like(theta)], axis=1),
            ],
            axis=1,
        )
        q = np.einsum("ni,ni->n", n_hat, omega)
        dq = np.einsum("nai,ni->na", dn_hat, omega) + np.einsum("ni,nai->na", n_hat, omega_a)
        gT = np.einsum("nij,nbj->nbi", g, T)  # (g X_b)_i
        s = np.einsum("ni,nbi->nb", omega, gT)

        # G^a_i = f^{ab} ∂_b Y_i
        G = [finv[:, a, 0] * dY[0] + finv[:, a, 1] * dY[1] for a in range(2)]

        jac_coef = np.zeros((Y.shape[0], Y.shape[0]))
        for a in range(2):
            jac_coef += (G[a] * (mu * q)) @ dY[a].T
        weight = sum(G[a] * (mu * dq[:, a]) for a in range(2))
        weight = weight + Y * (mu * q * (defect * H - V))
        weight = weight - sum(G[b] * (mu * defect * s[:, b]) for b in range(2))
        jac_coef += weight @ Y.T

        jac = jac_coef[np.ix_(self.rows, self.free)]
        if self.frozen:
            return jac

        jac_center = sum((G[a] * mu) @ dn_hat[:, a, :] for a in range(2))
        jac_center = jac_center + (Y * (mu * (defect * H - V))) @ n_hat
        jac_center = jac_center - sum((G[b] * (mu * defect)) @ gT[:, b, :] for b in range(2))
        return np.hstack([jac_center[self.rows], jac])

    def prepare(self, init: RadialSurface) -> RadialSurface:
        surface = init.extended(self.L)
        surface = _absorb_dipole(surface)
        return surface


def _check_initial(model: MetricModel, surface: RadialSurface, grid: QuadratureGrid) -> None:
    try:
        compute_frame(surface, grid, model, with_ricci=False)
    except (PointInsideCore, DegenerateSurface) as e:
        raise LeftValidityRegion(f"initial surface: {e}") from e


def solve_cmc_with_stats(
    model: MetricModel,
    H_target: float,
    init: RadialSurface,
    opts: Optional[SolverOptions] = None,
) -> SolveResult:
    """H_g(Σ) = H_target を Newton 法で解き、反復回数と残差も返す"""
    opts = opts or SolverOptions()
    if H_target <= 0:
        raise ValueError(f"H_target must be positive, got {H_target}")
    newton = _Newton(model, H_target, opts)
    surface = newton.prepare(init)
    _check_initial(model, surface, newton.grid)
    state = newton.evaluate(surface)
    lowest: Optional[float] = None

    for iteration in range(opts.max_newton_iters + 1):
        sup = float(np.abs(state.nodal).max())
        if sup <= opts.tol_residual:
            logger.debug("CMC solve converged in %d iterations (residual %.3e)", iteration, sup)
            return SolveResult(state.surface, iteration, sup, lowest)
        if iteration == opts.max_newton_iters:
            break

        if iteration == 0 and not newton.frozen:
            K, M, mean = jacobi_matrices(state.frame, newton.L)
            Z = _mean_zero_basis(mean)
            lowest = float(linalg.eigh(Z.T @ K @ Z, Z.T @ M @ Z, eigvals_only=True, subset_by_index=[0, 0])[0])
            if abs(lowest) < SINGULAR_EIGENVALUE:
                raise JacobianSingular(lowest)

        jac = newton.jacobian(state)
        try:
            step = linalg.solve(jac, -state.residual)
        except (linalg.LinAlgError, ValueError) as e:
            raise JacobianSingular(float("nan")) from e

        x0 = newton.pack(state.surface)
        current = float(np.linalg.norm(state.residual))
        t = opts.damping
        invalid_trials = 0
        accepted: Optional[_NewtonState] = None
        for _ in range(MAX_HALVINGS + 1):
            try:
                trial = newton.evaluate(newton.unpack(x0 + t * step, state.surface))
            except (PointInsideCore, DegenerateSurface, InvalidTerm):
                invalid_trials += 1
                t *= 0.5
                continue
            if np.linalg.norm(trial.residual) < current:
                accepted = trial
                break
            t *= 0.5
        if accepted is None:
            if invalid_trials == MAX_HALVINGS + 1:
                raise LeftValidityRegion(f"every trial step left the validity region (iteration {iteration})")
            raise NoConvergence(f"line search stalled at iteration {iteration}, residual {sup:.3e}")
        state = accepted

    raise NoConvergence(f"{opts.max_newton_iters} iterations, residual {float(np.abs(state.nodal).max()):.3e}")


def solve_cmc(
    model: MetricModel,
    H_target: float,
    init: RadialSurface,
    opts: Optional[SolverOptions] = None,
) -> RadialSurface:
    return solve_cmc_with_stats(model, H_target, init, opts).surface


async def solve_many(
    model: MetricModel,
    H_target: float,
    inits: Sequence[RadialSurface],
    opts: Optional[SolverOptions] = None,
    threads: int = 1,
) -> List[object]:
    """独立な初期値からの解を並列に求める (失敗は例外オブジェクトとして返す)"""
    semaphore = asyncio.Semaphore(max(1, threads))

    async def run(init: RadialSurface) -> object:
        async with semaphore:
            try:
                return await asyncio.to_thread(solve_cmc_with_stats, model, H_target, init, opts)
            except LabError as e:
                logger.warning("Solve failed: %s", e)
                return e

    return list(await asyncio.gather(*(run(init) for init in inits)))


def continue_foliation(
    model: MetricModel,
    H_list: Sequence[float],
    opts: Optional[SolverOptions] = None,
    init: Optional[RadialSurface] = None,
    k_eigen: int = 1,
) -> FoliationRecord:
    """H の減少列に沿って CMC 葉を順に解く (失敗時はそこで打ち切り)"""
    opts = opts or SolverOptions()
    H_values = [float(h) for h in H_list]
    if any(b >= a for a, b in zip(H_values, H_values[1:])):
        raise ValueError("H_list must be strictly decreasing")

    record = FoliationRecord()
    if not H_values:
        return record
    leaf = init or RadialSurface.sphere(2.0 / H_values[0], L_max=opts.L_max)
    previous_H: Optional[float] = None

    for H in H_values:
        if previous_H is not None:
            ratio = previous_H / H
            leaf = RadialSurface(leaf.center, leaf.coeffs * ratio, leaf.L_max)
        try:
            result = solve_cmc_with_stats(model, H, leaf, opts)
            spectrum = stability_spectrum(result.surface, model, k=k_eigen, grid=opts.grid)
            r0, r1 = radii(result.surface)
        except LabError as e:
            record.failure = f"H={H!r}: {type(e).__name__}: {e}"
            logger.error("Error in foliation at H=%s: %s", H, e, exc_info=True)
            break
        leaf = result.surface
        record.entries.append(
            FoliationEntry(
                H=H,
                surface=leaf,
                r0=r0,
                r1=r1,
                center=tuple(float(v) for v in leaf.center),
                lowest_meanzero_eigenvalue=spectrum.lowest,
                newton_iters=result.iterations,
                residual=result.residual,
            )
        )
        logger.info("Leaf H=%.6g solved: r0=%.6g r1=%.6g lambda1=%.6e iters=%d", H, r0, r1, spectrum.lowest, result.iterations)
        previous_H = H
    return record
