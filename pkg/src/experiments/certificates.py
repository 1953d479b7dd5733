from typing import Final

import numpy as np
import pandas as pd

from src.analysis.geometric_functionals import curvature_certificates
from src.geometry.metric_models import MetricKind, decay_scan, fd_jet_check, scalar_curvature_field
from src.geometry.spectral import default_colat, quadrature_grid
from src.geometry.surface_geometry import RadialSurface, expansion_residual, gauss_map_residual
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_RADII: Final[tuple] = (20.0, 40.0, 80.0, 160.0, 320.0)
N_CURVATURE_POINTS: Final[int] = 1000
CURVATURE_SHELL: Final[tuple] = (2.0, 1e3)
FD_POINTS: Final[tuple] = ((30.0, 0.0, 0.0), (0.0, 50.0, 20.0), (-40.0, 35.0, 60.0))
ELLIPSOID_AXES: Final[tuple] = (60.0, 50.0, 40.0)
ELLIPSOID_L: Final[int] = 8


def _random_points(model, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    lo = max(CURVATURE_SHELL[0], 1.01 * model.inner_radius)
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radius = np.exp(rng.uniform(np.log(lo), np.log(CURVATURE_SHELL[1]), size=n))
    return np.asarray(model.center) + radius[:, None] * directions


def _scalar_curvature(model, seed: int) -> dict:
    full, linearized = scalar_curvature_field(model, _random_points(model, N_CURVATURE_POINTS, seed))
    return {"max_full": float(np.abs(full).max()), "max_linearized": float(np.abs(linearized).max())}


def _jet_errors(model) -> pd.DataFrame:
    rows = []
    for point in FD_POINTS:
        x = np.asarray(model.center) + np.asarray(point)
        dg, d2g = fd_jet_check(model, x)
        rows.append({"x": float(x[0]), "y": float(x[1]), "z": float(x[2]), "dg_error": dg, "d2g_error": d2g})
    return pd.DataFrame(rows, columns=["x", "y", "z", "dg_error", "d2g_error"])


def _expansion(model) -> pd.DataFrame:
    rows = []
    for scale in (1.0, 2.0, 4.0):
        surface = RadialSurface.ellipsoid(scale * np.asarray(ELLIPSOID_AXES), ELLIPSOID_L, center=model.center)
        grid = quadrature_grid(default_colat(2 * ELLIPSOID_L))
        result = expansion_residual(surface, grid, model)
        rows.append({"scale": scale, "sup_residual": result.sup, "bound_constant": result.constant})
    return pd.DataFrame(rows, columns=["scale", "sup_residual", "bound_constant"])


def _gauss_map() -> float:
    surface = RadialSurface.ellipsoid(ELLIPSOID_AXES, ELLIPSOID_L)
    return gauss_map_residual(surface, quadrature_grid(default_colat(4 * ELLIPSOID_L)))


def _sphere_certificates(model, radii) -> pd.DataFrame:
    rows = []
    for R in radii:
        cert = curvature_certificates(RadialSurface.sphere(R, center=model.center), model)
        rows.append({"R": R, **cert.to_dict(), "H2_remainder": abs(cert.int_H2_dmu - 16.0 * np.pi)})
    return pd.DataFrame(rows)


async def run(ctx) -> None:
    """計量の減衰・スカラー曲率・ジェットの整合性と曲面の曲率証明量"""
    config = ctx.config
    model = ctx.model
    flat = model.is_flat
    symmetric = model.kind is not MetricKind.PERTURBED

    if not flat:
        decay = await ctx.stage("decay_scan", decay_scan, model, config.radii or DEFAULT_RADII,
                                [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.6, 0.0, 0.8)])
        if decay is not None:
            ctx.table("decay", decay.to_frame())
            ctx.check("decay_violations", len(decay.violations), 0.0, 0.0, Relation.CLOSE)

        jets = await ctx.stage("fd_jet_check", _jet_errors, model)
        if jets is not None:
            ctx.table("jet_check", jets)
            ctx.check("fd_dg_error", float(jets["dg_error"].max()), 0.0, 1e-5, Relation.AT_MOST)
            ctx.check("fd_d2g_error", float(jets["d2g_error"].max()), 0.0, 1e-4, Relation.AT_MOST)

    curvature = await ctx.stage("scalar_curvature", _scalar_curvature, model, config.seed)
    if curvature is not None:
        ctx.report.summary.update({f"scalar_curvature_{k}": v for k, v in curvature.items()})
        if symmetric:
            ctx.check("scalar_flatness", curvature["max_full"], 0.0, 1e-9, Relation.AT_MOST)

    expansion = await ctx.stage("expansion_residual", _expansion, model)
    if expansion is not None:
        ctx.table("expansion", expansion)
        if not flat:
            sup = expansion["sup_residual"].to_numpy()
            # 一次展開の残差は |x|⁻³ 程度で減る
            order = float(np.min(np.log2(sup[:-1] / sup[1:])))
            ctx.report.summary["expansion_residual_order"] = order
            ctx.check("expansion_residual_order", order, 2.5, 0.0, Relation.AT_LEAST)

    gauss = await ctx.stage("gauss_map_residual", _gauss_map)
    if gauss is not None:
        ctx.report.summary["gauss_map_residual"] = gauss
        ctx.check("gauss_map_identity", gauss, 0.0, 1e-6, Relation.AT_MOST)

    spheres = await ctx.stage("sphere_certificates", _sphere_certificates, model, config.radii or DEFAULT_RADII)
    if spheres is not None:
        ctx.table("sphere_certificates", spheres)
        if flat:
            ctx.check("H2_remainder", float(spheres["H2_remainder"].max()), 0.0, 1e-8, Relation.AT_MOST)
        else:
            steps = np.diff(spheres["H2_remainder"].to_numpy())
            ctx.check("H2_remainder_decreasing", float(np.sum(steps >= 0)), 0.0, 0.0, Relation.CLOSE)


def setup(runner) -> None:
    runner.register(Experiment.CERTIFICATES, run)
