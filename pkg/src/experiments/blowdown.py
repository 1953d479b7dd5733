from typing import Final

import numpy as np
import pandas as pd

from src.analysis.blowdown_analysis import (
    blowdown_chain,
    plane_fit,
    rescale_metric,
    rescale_surface,
    tension_scan,
)
from src.analysis.geometric_functionals import off_center_sphere
from src.experiments._common import bounded_ratio, store_leaves
from src.geometry.metric_models import MetricKind, decay_scan
from src.solver.cmc_solver import FoliationRecord, continue_foliation
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_H_LIST: Final[tuple] = (0.08, 0.04, 0.02, 0.01)
PLANE_RADIUS: Final[float] = 1e4
DECAY_RADII: Final[tuple] = (50.0, 100.0, 200.0, 400.0, 800.0)
DECAY_DIRECTIONS: Final[tuple] = ((1.0, 0.0, 0.0), (0.0, 0.6, 0.8))
RESCALE_FACTOR: Final[float] = 10.0


def _tension_table(record: FoliationRecord, model) -> pd.DataFrame:
    rows = []
    for entry in record.entries:
        scan = tension_scan(entry.surface, model)
        rows.append({"H": entry.H, "scaled_sup": scan.scaled_sup, "sup_grad_H_e": float(scan.grad_H_e.max()),
                     "sup_grad_H_g": scan.sup_grad_H_g})
    return pd.DataFrame(rows, columns=["H", "scaled_sup", "sup_grad_H_e", "sup_grad_H_g"])


def _plane(config):
    surface = rescale_surface(off_center_sphere(PLANE_RADIUS, config.r0), 1.0 / config.r0)
    return plane_fit(surface, config.window)


def _decay_exponents(model) -> tuple:
    original = decay_scan(model, DECAY_RADII, DECAY_DIRECTIONS)
    rescaled = decay_scan(rescale_metric(model, RESCALE_FACTOR), DECAY_RADII, DECAY_DIRECTIONS)
    return original.exponent("h"), rescaled.exponent("h")


def _closed_form_radius(m: float, r: float) -> float:
    phi = 1.0 + m / (2.0 * r)
    return (1.0 - m / (2.0 * r)) / phi ** 3


async def run(ctx) -> None:
    """H/2 倍と 1/r0 倍のブローダウン、張力の減衰、h^r の減衰指数"""
    config = ctx.config
    model = ctx.model
    opts = ctx.solver_options
    H_list = config.H_list or DEFAULT_H_LIST

    record = await ctx.stage("foliation", continue_foliation, model, H_list, opts)
    if record is not None:
        ctx.newton_iterations(sum(e.newton_iters for e in record.entries))
        await ctx.stage("store_leaves", store_leaves, record, ctx.out_dir)
        chain = await ctx.stage("blowdown_chain", blowdown_chain, record)
        if chain is not None and not chain.empty:
            ctx.table("blowdown_chain", chain)
            deviation = np.abs(chain["radius"].to_numpy() - 1.0)
            if not model.is_flat:
                ctx.check("blowdown_radius_trend", float(np.sum(np.diff(deviation) >= 0)), 0.0, 0.0, Relation.CLOSE)
            ctx.check("blowdown_center", float(chain["center_norm"].max()), 0.0, 1e-6, Relation.AT_MOST)
            if model.kind is MetricKind.SCHWARZSCHILD and not any(model.center):
                expected = np.array([_closed_form_radius(model.mass, e.r0) for e in record.entries])
                ctx.check("blowdown_radius_closed_form", float(np.max(np.abs(chain["radius"] - expected))),
                          0.0, 5e-3, Relation.AT_MOST)

        tension = await ctx.stage("tension_scan", _tension_table, record, model)
        if tension is not None and not tension.empty:
            ctx.table("tension", tension)
            if model.is_flat or (model.kind is MetricKind.SCHWARZSCHILD and not any(model.center)):
                ctx.check("tension_zero", float(tension["sup_grad_H_e"].max()), 0.0, 1e-10, Relation.AT_MOST)
            else:
                ctx.check("tension_scaled_variation", bounded_ratio(tension["scaled_sup"]), 0.0, 3.0, Relation.AT_MOST)

    plane = await ctx.stage("plane_fit", _plane, config)
    if plane is not None:
        ctx.report.summary["plane_distance"] = plane.distance
        ctx.report.summary["plane_max_deviation"] = plane.max_deviation
        ctx.check("plane_distance", plane.distance, 1.0, 1e-2, Relation.CLOSE)

    if not model.is_flat:
        exponents = await ctx.stage("rescaled_decay", _decay_exponents, model)
        if exponents is not None and None not in exponents:
            original, rescaled = exponents
            ctx.report.summary["decay_exponent_h"] = original
            ctx.report.summary["decay_exponent_h_rescaled"] = rescaled
            ctx.check("rescaled_decay_exponent", rescaled, original, 0.05, Relation.CLOSE)


def setup(runner) -> None:
    runner.register(Experiment.BLOWDOWN, run)
