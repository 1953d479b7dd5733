from typing import Final

import numpy as np
import pandas as pd

from src.analysis.blowdown_analysis import EnergyProfile, annulus_schedule_from, gauss_map_energy
from src.analysis.geometric_functionals import (
    family_sampling,
    off_center_sphere,
    qt_integral,
    qt_scan_family,
)
from src.geometry.surface_geometry import RadialSurface
from src.system.config import Experiment
from src.system.report import Relation


DEFAULT_FAMILY_RADII: Final[tuple] = (1e3, 1e4, 1e5)
DEFAULT_SYMMETRIC_RADII: Final[tuple] = (20.0, 100.0, 1000.0)
AXES: Final[np.ndarray] = np.eye(3)
# 帯のエネルギーは外側端から減る
EXPECTED_DECAY: Final[str] = "outer"
MIN_BANDS: Final[int] = 3


def _symmetric_table(model, radii) -> pd.DataFrame:
    rows = []
    for R in radii:
        surface = RadialSurface.sphere(R)
        for axis, b in zip("xyz", AXES):
            rows.append({"R": R, "axis": axis, "qt": qt_integral(surface, model, b)})
    return pd.DataFrame(rows, columns=["R", "axis", "qt"])


def band_pattern_holds(profile: EnergyProfile) -> bool:
    return len(profile.rows) >= MIN_BANDS and profile.decay_direction() == EXPECTED_DECAY


def _energy_profile(R: float, config, H: float):
    schedule = annulus_schedule_from(config.r0, H, config.K, config.s, config.L)
    axis = -np.asarray(config.b)
    surface = off_center_sphere(R, config.r0, axis)
    return gauss_map_energy(surface, schedule, sampling=family_sampling(R, config.r0, axis))


async def run(ctx) -> None:
    """中心の球面での対称性ゼロと、中心をずらした球面族での -8πm への収束"""
    config = ctx.config
    model = ctx.model
    m = model.mass
    R_list = config.R_list or DEFAULT_FAMILY_RADII

    symmetric = await ctx.stage("qt_symmetric", _symmetric_table, model, config.radii or DEFAULT_SYMMETRIC_RADII)
    if symmetric is not None:
        ctx.table("qt_symmetric", symmetric)
        ctx.check("qt_symmetric_zero", float(symmetric["qt"].abs().max()), 0.0, 1e-10, Relation.AT_MOST)

    axis = tuple(-v for v in config.b)
    reports = await ctx.stage("qt_family", qt_scan_family, model, R_list, config.r0, config.K, config.s, axis)
    if not reports:
        return
    family = pd.DataFrame(
        [
            {
                "R": R,
                "qt_total": rep.total,
                "inner": rep.inner_part,
                "outer": rep.outer_part,
                "intermediate": rep.intermediate_part,
                "H": rep.H,
                "r0": rep.r0,
            }
            for R, rep in zip(R_list, reports)
        ]
    )
    ctx.table("qt_family", family)
    # Kr0 ≥ s/H の行は全体のみ
    split = family.dropna(subset=["inner", "outer", "intermediate"])
    ctx.report.summary["qt_decomposed_rows"] = len(split)
    if len(split):
        parts = split["inner"] + split["outer"] + split["intermediate"]
        additivity = float(np.max(np.abs(parts - split["qt_total"]) / (1.0 + split["qt_total"].abs())))
        ctx.check("qt_parts_sum", additivity, 0.0, 1e-8, Relation.AT_MOST)

    last = reports[-1]
    if m > 0:
        target = -8.0 * np.pi * m
        gaps = np.abs(family["qt_total"].to_numpy() - target)
        ctx.check("qt_monotone_steps", float(np.sum(np.diff(gaps) >= 0)), 0.0, 0.0, Relation.CLOSE)
        ctx.check("qt_total_limit", last.total, target, 0.1, Relation.RELATIVE)
        share = abs(last.intermediate_part) / max(abs(last.total), np.finfo(float).tiny)
        ctx.check("qt_intermediate_share", share, 0.0, 0.2, Relation.AT_MOST)
    else:
        ctx.check("qt_family_zero", float(family["qt_total"].abs().max()), 0.0, 1e-10, Relation.AT_MOST)

    profile = await ctx.stage("gauss_map_energy", _energy_profile, float(R_list[-1]), config, last.H)
    if profile is not None:
        ctx.table("energy_profile", profile.to_frame())
        ctx.report.summary["l_n"] = profile.schedule.l_n
        ctx.report.summary["energy_decay_direction"] = profile.decay_direction() or "none"
        ctx.check("energy_additivity", profile.additivity_error, 0.0, 1e-8, Relation.AT_MOST)
        ctx.check("energy_band_monotone", float(band_pattern_holds(profile)), 1.0, 0.0, Relation.CLOSE)


def setup(runner) -> None:
    runner.register(Experiment.QT_SCAN, run)
