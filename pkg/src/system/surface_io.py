from __future__ import annotations

from pathlib import Path
from typing import Dict, Final, List, Optional, Tuple
import logging

import numpy as np

from src.errors import DuplicateMode, FormatError, IoFailure
from src.geometry.spectral import mode_index, mode_list
from src.geometry.surface_geometry import RadialSurface


COMMENT: Final[str] = "#"

logger = logging.getLogger(__name__)


def _float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError as e:
        raise FormatError(line, f"数値ではありません: {token!r}") from e
    if not np.isfinite(value):
        raise FormatError(line, f"有限でない値です: {token!r}")
    return value


def _int(token: str, line: int) -> int:
    try:
        return int(token)
    except ValueError as e:
        raise FormatError(line, f"整数ではありません: {token!r}") from e


def parse_surface(text: str) -> RadialSurface:
    """表面ファイルの内容を RadialSurface に変換する

    書式:
        # コメント
        L_MAX <int>
        CENTER <x> <y> <z>
        <l> <m> <coeff>   (モードごとに 1 行、省略したモードは 0)
    """
    L_max: Optional[int] = None
    center: Optional[Tuple[float, float, float]] = None
    modes: Dict[Tuple[int, int], float] = {}
    mode_lines: List[Tuple[int, int, int]] = []

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(COMMENT, 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        keyword = tokens[0].upper()
        if keyword == "L_MAX":
            if L_max is not None:
                raise FormatError(number, "L_MAX が重複しています")
            if len(tokens) != 2:
                raise FormatError(number, "L_MAX <int> の形式が必要です")
            L_max = _int(tokens[1], number)
            if L_max < 0:
                raise FormatError(number, f"L_MAX が負です: {L_max}")
        elif keyword == "CENTER":
            if center is not None:
                raise FormatError(number, "CENTER が重複しています")
            if len(tokens) != 4:
                raise FormatError(number, "CENTER <x> <y> <z> の形式が必要です")
            center = tuple(_float(t, number) for t in tokens[1:])
        else:
            if len(tokens) != 3:
                raise FormatError(number, f"<l> <m> <coeff> の形式が必要です: {raw.strip()!r}")
            l, m = _int(tokens[0], number), _int(tokens[1], number)
            if l < 0 or abs(m) > l:
                raise FormatError(number, f"不正なモード (l={l}, m={m})")
            if (l, m) in modes:
                raise DuplicateMode(number, l, m)
            modes[(l, m)] = _float(tokens[2], number)
            mode_lines.append((number, l, m))

    if L_max is None:
        raise FormatError(0, "L_MAX がありません")
    for number, l, m in mode_lines:
        if l > L_max:
            raise FormatError(number, f"l={l} が L_MAX={L_max} を超えています")

    coeffs = np.zeros(len(mode_list(L_max)))
    for (l, m), value in modes.items():
        coeffs[mode_index(l, m)] = value
    return RadialSurface(np.asarray(center or (0.0, 0.0, 0.0)), coeffs, L_max)


def format_surface(surface: RadialSurface) -> str:
    """正準形: 全モードを repr (往復で値が保存される表現) で書く"""
    lines = [
        f"L_MAX {surface.L_max}",
        "CENTER " + " ".join(repr(float(v)) for v in surface.center),
    ]
    for (l, m), value in zip(mode_list(surface.L_max), surface.coeffs):
        lines.append(f"{l} {m} {float(value)!r}")
    return "\n".join(lines) + "\n"


def load_surface(path: str | Path) -> RadialSurface:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e
    return parse_surface(text)


def store_surface(surface: RadialSurface, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_surface(surface), encoding="utf-8")
    except OSError as e:
        raise IoFailure(path, e) from e
    logger.debug("Stored surface (L_max=%d) to %s", surface.L_max, path)
    return path
