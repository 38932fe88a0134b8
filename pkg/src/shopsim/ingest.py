"""Turn continuous position logs into grid trajectories.

Pipeline: drop basketless records, trim to the store bounds and the checkout
time, bin points into cells, snap blocked cells to the nearest walkable one,
collapse dwell, bridge gaps with shortest paths, pin the start to the entrance
and the end to a checkout, then derive the action sequence.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .layout import Basket, Cell, Layout
from .nav import Navigator
from .trajectory import Trajectory, trajectory_from_route

APPROACH_RADIUS = 1

NO_BASKET = "no-basket"
EMPTY_AFTER_TRIM = "empty-after-trim"
UNREACHABLE_POINT = "unreachable-point"


@dataclass(frozen=True, eq=False)
class RawTrajectory:
    samples: np.ndarray  # (n, 3): t seconds, x metres, y metres
    basket: frozenset[str] | None = None
    checkout_ts: float | None = None
    id: str | int | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float).reshape(-1, 3)
        if len(s) > 1 and not np.all(np.diff(s[:, 0]) > 0):
            raise ValueError("sample timestamps must be strictly increasing")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.basket is not None:
            object.__setattr__(self, "basket", frozenset(self.basket))


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""
    id: str | int | None = None

    def __bool__(self) -> bool:
        return False


# -- snapping ----------------------------------------------------------------------


def point_to_cell(x: float, y: float, cell_size: float) -> Cell:
    return (math.floor(x / cell_size), math.floor(y / cell_size))


def snap(layout: Layout, cell: Cell) -> tuple[Cell, int] | None:
    """Nearest walkable cell by breadth-first distance over the full grid.

    Neighbours expand in N, E, S, W order, so the first walkable cell found
    at the minimal distance wins.  Returns ``(cell, distance)``.
    """
    if not layout.in_bounds(cell):
        return None
    if layout.is_walkable(cell):
        return cell, 0
    seen = {cell}
    frontier = deque([(cell, 0)])
    while frontier:
        c, d = frontier.popleft()
        for n in ((c[0], c[1] - 1), (c[0] + 1, c[1]), (c[0], c[1] + 1), (c[0] - 1, c[1])):
            if n in seen or not layout.in_bounds(n):
                continue
            if layout.is_walkable(n):
                return n, d + 1
            seen.add(n)
            frontier.append((n, d + 1))
    return None


# -- preprocessing --------------------------------------------------------------------


def _basket_shelf_neighbourhood(layout: Layout, items: Iterable[str]) -> set[Cell]:
    return set(layout.approach_cells([s for i in items for s in layout.category_shelves(i)]))


def _nearest_checkout(nav: Navigator, layout: Layout, cell: Cell) -> tuple[Cell, Cell]:
    """Closest checkout-adjacent cell; ties go to the earlier-listed checkout."""
    best = None
    for co in layout.checkout_ids:
        for a in layout.checkout_approach_cells(co):
            d = nav.distance(cell, a)
            if best is None or d < best[0]:
                best = (d, co, a)
    if best is None or math.isinf(best[0]):
        raise ValueError("no reachable checkout")
    return best[1], best[2]


def preprocess(raw: RawTrajectory, layout: Layout, max_snap: int | None = None, infer: bool = True) -> Trajectory | Rejection:
    """Grid-align one raw record, or explain why it was dropped."""
    if raw.basket is None:
        return Rejection(NO_BASKET, id=raw.id)
    s = raw.samples
    if raw.checkout_ts is not None:
        s = s[s[:, 0] <= raw.checkout_ts]
    cs = layout.cell_size
    inside = (s[:, 1] >= 0) & (s[:, 2] >= 0) & (s[:, 1] < layout.width * cs) & (s[:, 2] < layout.height * cs)
    s = s[inside]
    if len(s) == 0:
        return Rejection(EMPTY_AFTER_TRIM, id=raw.id)

    nav = Navigator.for_layout(layout)
    cells: list[Cell] = []
    for _, x, y in s:
        c = point_to_cell(x, y, cs)
        snapped = snap(layout, c)
        if snapped is None or (max_snap is not None and snapped[1] > max_snap):
            return Rejection(UNREACHABLE_POINT, f"point ({x:.3f}, {y:.3f}) -> cell {c}", raw.id)
        c = snapped[0]
        if math.isinf(nav.distance(layout.entrance, c)):
            return Rejection(UNREACHABLE_POINT, f"cell {c} not reachable from the entrance", raw.id)
        if not cells or cells[-1] != c:
            cells.append(c)

    known = frozenset(i for i in raw.basket if i in layout.category_ids)
    flags = tuple(f"unknown-item:{i}" for i in sorted(raw.basket - known))

    # cut after the first checkout-adjacent cell that follows the last basket-shelf approach
    if raw.checkout_ts is None:
        near_items = _basket_shelf_neighbourhood(layout, known)
        last_item = max((i for i, c in enumerate(cells) if c in near_items), default=0)
        checkout_adj = {a: co for co in layout.checkout_ids for a in layout.checkout_approach_cells(co)}
        for i in range(last_item, len(cells)):
            if cells[i] in checkout_adj:
                cells = cells[: i + 1]
                break

    route: list[Cell] = [layout.entrance]
    for c in cells:
        if c != route[-1]:
            route.extend(nav.shortest_path(route[-1], c)[1:])
    checkout, approach = _nearest_checkout(nav, layout, route[-1])
    if route[-1] != approach:
        route.extend(nav.shortest_path(route[-1], approach)[1:])

    traj = trajectory_from_route(layout, route, [], Basket(known, checkout), method="ingest")
    if flags:
        traj = traj.with_pickups((), flags)
    return infer_pickups(traj, layout) if infer else traj


def _distance_to_category(nav: Navigator, layout: Layout, category: str) -> np.ndarray | None:
    """Grid of steps to stand next to a shelf of ``category``, plus one (adjacent = 1)."""
    approach = layout.category_approach_cells(category)
    if not approach:
        return None
    d = np.min([nav.field(a).dist for a in approach], axis=0)
    return d + 1


def infer_pickups(traj: Trajectory, layout: Layout) -> Trajectory:
    """Attribute each basket item to the step of closest approach (latest on ties)."""
    nav = Navigator.for_layout(layout)
    xs = traj.states[:, 0].astype(int)
    ys = traj.states[:, 1].astype(int)
    pickups, flags = [], []
    for item in traj.conditions.ordered_items:
        grid = _distance_to_category(nav, layout, item)
        if grid is None:
            pickups.append((len(traj) - 1, item))
            flags.append(f"no-shelf:{item}")
            continue
        d = grid[ys, xs]
        best = float(d.min())
        idx = int(np.flatnonzero(d == best)[-1])
        pickups.append((idx, item))
        if best > APPROACH_RADIUS:
            flags.append(f"not-approached:{item}")
    pickups.sort()
    return Trajectory(traj.states, traj.actions, traj.conditions, tuple(pickups), tuple(traj.flags) + tuple(flags), traj.method)


# -- raw log I/O -----------------------------------------------------------------------


def raw_to_record(raw: RawTrajectory) -> dict:
    return {
        "id": raw.id,
        "samples": [[float(t), float(x), float(y)] for t, x, y in raw.samples],
        "basket": None if raw.basket is None else sorted(raw.basket),
        "checkout_ts": raw.checkout_ts,
    }


def raw_from_record(rec: dict) -> RawTrajectory:
    basket = rec.get("basket")
    return RawTrajectory(
        np.array(rec["samples"], dtype=float).reshape(-1, 3),
        None if basket is None else frozenset(basket),
        rec.get("checkout_ts"),
        rec.get("id"),
    )


def write_raw(path: str | Path, raws: Iterable[RawTrajectory]) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in raws:
            fh.write(json.dumps(raw_to_record(r), separators=(",", ":")) + "\n")
            n += 1
    return n


def iter_raw(path: str | Path) -> Iterator[RawTrajectory]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield raw_from_record(json.loads(line))


@dataclass
class IngestResult:
    trajectories: list[Trajectory] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rejections:
            out[r.reason] = out.get(r.reason, 0) + 1
        return dict(sorted(out.items()))


def ingest_all(raws: Sequence[RawTrajectory], layout: Layout, max_snap: int | None = None) -> IngestResult:
    res = IngestResult()
    for r in raws:
        out = preprocess(r, layout, max_snap)
        (res.rejections if isinstance(out, Rejection) else res.trajectories).append(out)
    return res


SCHEMA_DIR = Path(__file__).parent / "data"


def schema(name: str) -> dict:
    """Load a bundled JSON schema: ``raw_trajectory`` or ``trajectory``."""
    return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
