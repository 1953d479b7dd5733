import itertools
from typing import Final, List

import numpy as np
import pandas as pd

from src.analysis.blowdown_analysis import sphere_fit
from src.errors import LabError
from src.geometry.spectral import mode_index, n_modes
from src.geometry.surface_geometry import RadialSurface, radii, surface_distance
from src.solver.cmc_solver import SolveResult, solve_many
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_H: Final[float] = 0.05
CENTER_JITTER: Final[float] = 0.3
SCALE_JITTER: Final[float] = 0.1
SHAPE_JITTER: Final[float] = 0.05
SHAPE_MAX_DEGREE: Final[int] = 4
UNIQUENESS_TOLERANCE: Final[float] = 1e-6


def random_inits(H: float, L_max: int, count: int, seed: int, center=(0.0, 0.0, 0.0)) -> List[RadialSurface]:
    """半径 R = 2/H の球面をランダムに崩した初期値

    中心は |c| ≤ 0.3R、形は 2 ≤ l ≤ 4 のモードに L² で相対 0.05 の大きさで加える。
    """
    rng = np.random.default_rng(seed)
    R = 2.0 / H
    inits = []
    for _ in range(count):
        offset = rng.normal(size=3)
        offset *= CENTER_JITTER * R * rng.uniform() / np.linalg.norm(offset)
        coeffs = np.zeros(n_modes(L_max))
        coeffs[0] = R * (1.0 + rng.uniform(-SCALE_JITTER, SCALE_JITTER)) * np.sqrt(4.0 * np.pi)
        start, stop = mode_index(2, -2), n_modes(min(L_max, SHAPE_MAX_DEGREE))
        shape = rng.normal(size=stop - start)
        coeffs[start:stop] = SHAPE_JITTER * coeffs[0] * shape / np.linalg.norm(shape)
        inits.append(RadialSurface(np.asarray(center) + offset, coeffs, L_max))
    return inits


def _centered(surface: RadialSurface) -> RadialSurface:
    fit = sphere_fit(surface)
    return RadialSurface(surface.center - np.asarray(fit.center), surface.coeffs, surface.L_max)


async def run(ctx) -> None:
    """ランダムな初期値から同じ H の CMC 面を解き、解が一致するかを調べる"""
    config = ctx.config
    model = ctx.model
    opts = ctx.solver_options
    H = config.H_target or DEFAULT_H

    inits = random_inits(H, opts.L_max, config.n_inits, config.seed, model.center)
    results = await ctx.stage("solve_many", solve_many, model, H, inits, opts, ctx.threads)
    if results is None:
        return
    solved = [(i, r) for i, r in enumerate(results) if isinstance(r, SolveResult)]
    ctx.newton_iterations(sum(r.iterations for _, r in solved))

    # 平坦な場合は平行移動の自由度が残るので中心をそろえて比べる
    surfaces = [_centered(r.surface) if model.is_flat else r.surface for _, r in solved]
    rows = []
    for (i, result), surface in zip(solved, surfaces):
        r0, r1 = radii(result.surface)
        rows.append({"init": i, "converged": True, "iterations": result.iterations, "residual": result.residual,
                     "r0": r0, "r1": r1, "distance_to_first": surface_distance(surface, surfaces[0])})
    for i, error in enumerate(results):
        if isinstance(error, LabError):
            rows.append({"init": i, "converged": False, "error": type(error).__name__})
    table = pd.DataFrame(rows).sort_values("init").reset_index(drop=True)
    ctx.table("uniqueness", table)

    ctx.check("all_converged", len(solved), len(inits), 0.0, Relation.CLOSE)
    if len(surfaces) >= 2:
        spread = max(surface_distance(a, b) for a, b in itertools.combinations(surfaces, 2))
        ctx.report.summary["max_pairwise_distance"] = spread
        ctx.check("max_pairwise_distance", spread, 0.0, UNIQUENESS_TOLERANCE, Relation.AT_MOST)


def setup(runner) -> None:
    runner.register(Experiment.UNIQUENESS_PROBE, run)
