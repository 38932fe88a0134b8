"""Byte-stable file writers for grids, tables and JSON documents."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def write_pgm(path: str | Path, grid: np.ndarray, scale: int = 1) -> None:
    """Plain (ASCII) grayscale image; NaN cells are black, the maximum is white."""
    g = np.asarray(grid, dtype=float)
    finite = np.nan_to_num(g, nan=0.0)
    top = finite.max() if finite.size and finite.max() > 0 else 1.0
    px = np.rint(255 * np.clip(finite, 0, None) / top).astype(int)
    if scale > 1:
        px = np.kron(px, np.ones((scale, scale), dtype=int))
    h, w = px.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in px]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:]], dtype=int).reshape(h, w)


def format_number(v: float | None) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float) and math.isinf(v):
        return "Inf"
    if isinstance(v, float) and math.isnan(v):
        return "NaN"
    return f"{v:.6g}" if abs(v) < 1e-3 and v != 0 else f"{v:.6f}"


def write_grid(path: str | Path, grid: np.ndarray) -> None:
    """Whitespace-separated numeric grid, one row per line (NaN for undefined cells)."""
    rows = [" ".join("nan" if np.isnan(v) else f"{v:.10e}" for v in row) for row in np.asarray(grid, dtype=float)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_grid(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, ndmin=2)


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    out = ["\t".join(header)]
    for r in rows:
        out.append("\t".join(v if isinstance(v, str) else format_number(v) for v in r))
    Path(path).write_text("\n".join(out) + "\n")


def dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=False, default=_default) + "\n"


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path: str | Path, data) -> None:
    Path(path).write_text(dump_json(data))


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
