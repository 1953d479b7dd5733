from typing import Final

import numpy as np
import pandas as pd

from src.analysis.geometric_functionals import center_of_mass
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_RADII: Final[tuple] = (100.0, 200.0, 400.0, 800.0)
DEFAULT_COLAT: Final[int] = 64


async def run(ctx) -> None:
    config = ctx.config
    result = await ctx.stage(
        "center_of_mass", center_of_mass, ctx.model, config.radii or DEFAULT_RADII, config.n_colat or DEFAULT_COLAT
    )
    if result is None:
        return
    ctx.table(
        "center_radii",
        pd.DataFrame([(R, *c) for R, c in result.per_radius], columns=["R", "cx", "cy", "cz"]),
    )
    ctx.report.summary["center"] = [float(v) for v in result.center]
    ctx.report.summary["center_residual"] = result.residual
    ctx.report.summary["mass"] = result.mass
    # モデルの中心 (平行移動量) が期待値
    expected = np.asarray(config.metric.center)
    ctx.check("center_error", float(np.linalg.norm(result.center - expected)), 0.0, 1e-3, Relation.AT_MOST)


def setup(runner) -> None:
    runner.register(Experiment.CENTER_OF_MASS, run)
