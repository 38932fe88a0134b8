"""Graph view of the store grid: breadth-first distances and shortest paths.

Edges join 4-adjacent walkable cells with unit weight, so breadth-first search
gives exact shortest paths.  Ties are broken by preferring neighbours in the
order N, E, S, W.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .layout import DIRECTION_DELTAS, Cell, Layout


class NavError(ValueError):
    pass


class InvalidCellError(NavError):
    """A query endpoint is out of bounds or not walkable."""


class NoPathError(NavError):
    """Two walkable cells are not connected."""


@dataclass(frozen=True)
class DistanceField:
    source: Cell
    dist: np.ndarray  # (height, width) step counts, inf where unreachable

    def __getitem__(self, cell: Cell) -> float:
        return float(self.dist[cell[1], cell[0]])


class Navigator:
    """Cached breadth-first queries over a walkable mask."""

    def __init__(self, walkable: np.ndarray):
        self.walkable = np.asarray(walkable, dtype=bool)
        self.height, self.width = self.walkable.shape
        self._fields: dict[Cell, DistanceField] = {}

    @classmethod
    def for_layout(cls, layout: Layout) -> Navigator:
        return _layout_navigator(layout)

    def is_walkable(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and bool(self.walkable[y, x])

    def _check(self, cell: Cell) -> Cell:
        cell = (int(cell[0]), int(cell[1]))
        if not self.is_walkable(cell):
            raise InvalidCellError(f"cell {cell} is not a walkable cell")
        return cell

    def neighbours(self, cell: Cell) -> list[Cell]:
        x, y = cell
        return [(x + dx, y + dy) for dx, dy in DIRECTION_DELTAS if self.is_walkable((x + dx, y + dy))]

    def field(self, source: Cell) -> DistanceField:
        source = self._check(source)
        cached = self._fields.get(source)
        if cached is not None:
            return cached
        dist = np.full((self.height, self.width), np.inf)
        dist[source[1], source[0]] = 0
        queue = deque([source])
        walk = self.walkable
        w, h = self.width, self.height
        while queue:
            x, y = queue.popleft()
            nd = dist[y, x] + 1
            for dx, dy in DIRECTION_DELTAS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h and walk[ny, nx] and dist[ny, nx] == np.inf:
                    dist[ny, nx] = nd
                    queue.append((nx, ny))
        dist.setflags(write=False)
        df = DistanceField(source, dist)
        self._fields[source] = df
        return df

    def distance(self, a: Cell, b: Cell) -> float:
        self._check(a)
        return self.field(b)[a]

    def shortest_path(self, a: Cell, b: Cell) -> list[Cell]:
        """Cells from ``a`` to ``b`` inclusive along a minimal 4-connected route."""
        a = self._check(a)
        dist = self.field(b).dist
        if dist[a[1], a[0]] == np.inf:
            raise NoPathError(f"no path from {a} to {b}")
        path = [a]
        cur = a
        while cur != b:
            d = dist[cur[1], cur[0]]
            for nb in self.neighbours(cur):
                if dist[nb[1], nb[0]] == d - 1:
                    cur = nb
                    break
            path.append(cur)
        return path

    def random_shortest_path(self, a: Cell, b: Cell, rng: np.random.Generator) -> list[Cell]:
        """A minimal route whose every step picks uniformly among distance-reducing neighbours."""
        a = self._check(a)
        dist = self.field(b).dist
        if dist[a[1], a[0]] == np.inf:
            raise NoPathError(f"no path from {a} to {b}")
        path = [a]
        cur = a
        while cur != b:
            d = dist[cur[1], cur[0]]
            options = [nb for nb in self.neighbours(cur) if dist[nb[1], nb[0]] == d - 1]
            cur = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
            path.append(cur)
        return path

    def nearest(self, source: Cell, candidates: Sequence[Cell]) -> tuple[Cell, float]:
        """Closest candidate to ``source``; ties go to the earliest candidate."""
        dist = self.field(source).dist
        best, best_d = None, np.inf
        for c in candidates:
            d = dist[c[1], c[0]]
            if d < best_d:
                best, best_d = c, d
        if best is None:
            raise NoPathError(f"none of {list(candidates)} reachable from {source}")
        return best, float(best_d)


@lru_cache(maxsize=64)
def _layout_navigator(layout: Layout) -> Navigator:
    return Navigator(layout.walkable)


def distance_field(layout: Layout, source: Cell) -> DistanceField:
    return Navigator.for_layout(layout).field(source)


def shortest_path(layout: Layout, a: Cell, b: Cell) -> list[Cell]:
    return Navigator.for_layout(layout).shortest_path(a, b)


@dataclass(frozen=True)
class WaypointDistances:
    matrix: np.ndarray
    unreachable: tuple[tuple[int, int], ...]

    @property
    def ok(self) -> bool:
        return not self.unreachable


def waypoint_distances(nav: Layout | Navigator, waypoints: Sequence[Cell]) -> WaypointDistances:
    """Pairwise shortest-path step counts between ``waypoints``.

    Unreachable pairs hold ``inf`` and are listed in ``unreachable``.
    """
    if isinstance(nav, Layout):
        nav = Navigator.for_layout(nav)
    n = len(waypoints)
    mat = np.zeros((n, n))
    for i, w in enumerate(waypoints):
        dist = nav.field(w).dist
        for j, v in enumerate(waypoints):
            nav._check(v)
            mat[i, j] = dist[v[1], v[0]]
    unreachable = tuple((i, j) for i in range(n) for j in range(i + 1, n) if np.isinf(mat[i, j]))
    return WaypointDistances(mat, unreachable)
