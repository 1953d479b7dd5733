from functools import partial
from typing import Final

import numpy as np
import pandas as pd

from src.geometry.surface_geometry import RadialSurface
from src.solver.cmc_solver import solve_cmc_with_stats, stability_inequality_check, stability_spectrum
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_H: Final[float] = 0.05
N_INEQUALITY_TESTS: Final[int] = 50


def _analyze(model, opts, k: int, seed: int, H: float) -> dict:
    result = solve_cmc_with_stats(model, H, RadialSurface.sphere(2.0 / H, L_max=opts.L_max), opts)
    spectrum = stability_spectrum(result.surface, model, k=k, grid=opts.grid)
    margin = stability_inequality_check(result.surface, model, N_INEQUALITY_TESTS, seed, grid=opts.grid)
    return {"result": result, "spectrum": spectrum, "margin": margin}


async def run(ctx) -> None:
    """一枚の CMC 葉の Jacobi スペクトルと安定性不等式"""
    config = ctx.config
    model = ctx.model
    opts = ctx.solver_options
    H_values = config.H_list or (config.H_target or DEFAULT_H,)

    outputs = await ctx.map_points("stability", partial(_analyze, model, opts, config.k_eigen, config.seed), H_values)
    rows = []
    margins = []
    lowest = []
    for H, out in zip(H_values, outputs):
        if out is None:
            continue
        ctx.newton_iterations(out["result"].iterations)
        r = out["result"].surface.mean_radius
        for j, value in enumerate(out["spectrum"].eigenvalues):
            rows.append({"H": H, "k": j + 1, "eigenvalue": float(value), "mean_radius": r})
        margins.append(out["margin"])
        lowest.append(float(out["spectrum"].lowest))

    table = pd.DataFrame(rows, columns=["H", "k", "eigenvalue", "mean_radius"])
    ctx.table("spectrum", table)
    if not rows:
        return
    ctx.report.summary["worst_inequality_margin"] = float(min(margins))
    ctx.check("stability_inequality", float(min(margins)), 0.0, 1e-8, Relation.AT_LEAST)
    if model.is_flat:
        # 平坦空間では l=1 (平行移動) の 3 つだけが 0
        translations = table[table["k"] <= 3]["eigenvalue"]
        ctx.check("eigenvalues_zero", float(np.abs(translations).max()), 0.0, 1e-9, Relation.AT_MOST)
    else:
        ctx.check("lambda1_positive", float(min(lowest)), 0.0, 0.0, Relation.AT_LEAST)


def setup(runner) -> None:
    runner.register(Experiment.STABILITY, run)
