from pathlib import Path
from typing import Final, Sequence, Tuple

import numpy as np

from src.solver.cmc_solver import FoliationRecord
from src.system.surface_io import store_surface


DEFAULT_H_LIST: Final[Tuple[float, ...]] = tuple(float(h) for h in np.geomspace(1e-1, 1e-3, 12))
# 丸め誤差程度の値どうしの比は意味を持たない
CERTIFICATE_FLOOR: Final[float] = 1e-8


def bounded_ratio(values: Sequence[float], floor: float = CERTIFICATE_FLOOR) -> float:
    """max/min (min は floor で下から抑える)"""
    values = np.abs(np.asarray(values, dtype=float))
    if values.size == 0:
        return 1.0
    return float(values.max() / max(values.min(), floor))


def store_leaves(record: FoliationRecord, out_dir: Path) -> None:
    for index, entry in enumerate(record.entries):
        store_surface(entry.surface, Path(out_dir) / "leaves" / f"leaf_{index:02d}.surf")
