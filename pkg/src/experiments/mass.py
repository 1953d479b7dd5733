from typing import Final

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression

from src.analysis.geometric_functionals import adm_mass, divergence_closure, mass_flux_on_sphere, mass_tail
from src.geometry.metric_models import MetricKind
from src.geometry.surface_geometry import RadialSurface
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_RADII: Final[tuple] = (100.0, 200.0, 400.0, 800.0)
DEFAULT_FLUX_RADII: Final[tuple] = (250.0, 500.0, 1000.0)
DEFAULT_COLAT: Final[int] = 64
TAIL_RADIUS: Final[float] = 100.0
CLOSURE_RADIUS: Final[float] = 64.0
CLOSURE_AXES: Final[tuple] = (22.0, 20.0, 18.0)
CLOSURE_L: Final[int] = 12


def _closure(model):
    surface = RadialSurface.ellipsoid(CLOSURE_AXES, CLOSURE_L, center=model.center)
    return divergence_closure(surface, model, CLOSURE_RADIUS)


def _flux_table(model, radii, n_colat: int) -> pd.DataFrame:
    rows = []
    for R in radii:
        rows.append({"R": R, "flux": mass_flux_on_sphere(model, R, n_colat), "F": mass_tail(model, R)})
    return pd.DataFrame(rows, columns=["R", "flux", "F"])


async def run(ctx) -> None:
    """ADM 質量の外挿、球面上の質量フラックスと F(r)"""
    config = ctx.config
    model = ctx.model
    m = model.mass
    n_colat = config.n_colat or DEFAULT_COLAT
    radii = config.radii or DEFAULT_RADII
    flux_radii = config.R_list or DEFAULT_FLUX_RADII
    schwarzschild = model.kind is MetricKind.SCHWARZSCHILD and not any(model.center)

    report = await ctx.stage("adm_mass", adm_mass, model, radii, n_colat)
    if report is not None:
        ctx.table("mass_radii", pd.DataFrame(report.radii_values, columns=["R", "mass_estimate"]))
        ctx.report.summary["extrapolated_mass"] = report.extrapolated_mass
        ctx.report.summary["extrapolation_residual"] = report.extrapolation_residual
        if model.kind is not MetricKind.PERTURBED:
            ctx.check("extrapolated_mass", report.extrapolated_mass, m, 1e-4 if m > 0 else 1e-12, Relation.CLOSE)

    flux = await ctx.stage("mass_flux", _flux_table, model, flux_radii, n_colat)
    if flux is not None:
        if schwarzschild:
            flux["closed_form"] = -8.0 * np.pi * m * (1.0 + m / (2.0 * flux["R"])) ** 3
            error = float(np.max(np.abs(flux["flux"] / flux["closed_form"] - 1.0)))
            ctx.check("mass_flux_closed_form", error, 0.0, 1e-6, Relation.AT_MOST)
        ctx.table("mass_flux", flux)
        m_adm = report.extrapolated_mass if report is not None else m
        excess = float(np.max(np.abs(flux["flux"] + 8.0 * np.pi * m_adm) - flux["F"]))
        ctx.check("mass_flux_within_tail", excess, 0.0, 1e-12, Relation.AT_MOST)

        if report is not None and len(flux) >= 2:
            x = (1.0 / flux["R"].to_numpy())[:, None]
            limit = float(LinearRegression().fit(x, flux["flux"].to_numpy()).intercept_)
            ctx.report.summary["extrapolated_flux"] = limit
            gap = abs(limit + 8.0 * np.pi * report.extrapolated_mass)
            allowed = 16.0 * np.pi * report.extrapolation_residual + 1e-3 * max(abs(limit), 1.0)
            ctx.check("flux_mass_consistency", gap, 0.0, allowed, Relation.AT_MOST)

    closure = await ctx.stage("divergence_closure", _closure, model)
    if closure is not None:
        ctx.report.summary.update({f"closure_{k}": float(v) for k, v in closure._asdict().items()})
        ctx.check("divergence_closure", closure.relative_error, 0.0, 1e-4, Relation.AT_MOST)

    if m > 0:
        tail = await ctx.stage("mass_tail", mass_tail, model, TAIL_RADIUS)
        if tail is not None:
            ctx.report.summary["F_100"] = tail
            if schwarzschild:
                ctx.check("F_100", tail, 24.0 * np.pi * m ** 2 / TAIL_RADIUS, 0.02, Relation.RELATIVE)


def setup(runner) -> None:
    runner.register(Experiment.MASS, run)
