import numpy as np
import pandas as pd

from src.analysis.geometric_functionals import curvature_certificates
from src.experiments._common import DEFAULT_H_LIST, bounded_ratio, store_leaves
from src.geometry.metric_models import MetricKind
from src.solver.cmc_solver import FoliationRecord, continue_foliation
from src.system.config import Experiment
from src.system.report import Relation


def _certificate_table(record: FoliationRecord, model) -> pd.DataFrame:
    rows = []
    for entry in record.entries:
        cert = curvature_certificates(entry.surface, model)
        rows.append(
            {
                "H": entry.H,
                "r0": entry.r0,
                **cert.to_dict(),
                "H2_remainder_scaled": abs(cert.int_H2_dmu - 16.0 * np.pi) * entry.r0,
                "Aring_scaled": cert.sup_scaled_Aring * np.sqrt(entry.r0),
            }
        )
    return pd.DataFrame(rows)


async def run(ctx) -> None:
    """H の列に沿った CMC 葉の連続解法と安定性・曲率の証明量"""
    config = ctx.config
    model = ctx.model
    opts = ctx.solver_options
    H_list = config.H_list or DEFAULT_H_LIST

    record = await ctx.stage("foliation", continue_foliation, model, H_list, opts, None, config.k_eigen)
    if record is None:
        return
    ctx.newton_iterations(sum(e.newton_iters for e in record.entries))
    frame = record.to_frame()
    ctx.table("foliation", frame)
    await ctx.stage("store_leaves", store_leaves, record, ctx.out_dir)
    if record.failure is not None:
        ctx.report.summary["foliation_failure"] = record.failure

    ctx.check("leaves_converged", len(record.entries), len(H_list), 0.0, Relation.CLOSE)
    if frame.empty:
        return
    ctx.check("max_residual", float(frame["residual"].max()), 0.0, opts.tol_residual, Relation.AT_MOST)

    lam = frame["lambda1"].to_numpy()
    if model.is_flat:
        ctx.check("lambda1_zero", float(np.abs(lam).max()), 0.0, 1e-9, Relation.AT_MOST)
    else:
        ctx.check("lambda1_positive", float(lam.min()), 0.0, 0.0, Relation.AT_LEAST)
        if model.kind is MetricKind.SCHWARZSCHILD and not any(model.center):
            center = np.sqrt(frame["cx"] ** 2 + frame["cy"] ** 2 + frame["cz"] ** 2)
            ctx.check("max_center_norm", float(center.max()), 0.0, 1e-6, Relation.AT_MOST)
            scaled = lam * frame["r0"].to_numpy() ** 3
            spread = float(np.max(np.abs(scaled / np.median(scaled) - 1.0)))
            ctx.report.summary["lambda1_r3_median"] = float(np.median(scaled))
            ctx.check("lambda1_r3_spread", spread, 0.0, 0.2, Relation.AT_MOST)
            ctx.check("max_r1_over_r0", float((frame["r1"] / frame["r0"]).max()), 1.0, 1e-6, Relation.AT_MOST)

    certificates = await ctx.stage("certificates", _certificate_table, record, model)
    if certificates is not None:
        ctx.table("certificates", certificates)
        if not model.is_flat:
            ctx.check("H2_remainder_variation", bounded_ratio(certificates["H2_remainder_scaled"]), 0.0, 3.0, Relation.AT_MOST)
            ctx.check("Aring_scaled_variation", bounded_ratio(certificates["Aring_scaled"]), 0.0, 3.0, Relation.AT_MOST)


def setup(runner) -> None:
    runner.register(Experiment.FOLIATE, run)
