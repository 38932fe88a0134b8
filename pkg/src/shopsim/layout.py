"""Discretized store world: grid geometry, shelf contents, entrance and checkouts.

Layouts are loaded from a versioned YAML document.  Grid rows use one character
per cell::

    #  wall        .  floor       S  shelf
    E  entrance    C  checkout

Coordinates are ``(column, row)`` with the origin at the top-left cell.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import yaml

Cell = tuple[int, int]

FORMAT_VERSION = 1
DEFAULT_CELL_SIZE = 0.5


class CellKind(IntEnum):
    FLOOR = 0
    WALL = 1
    SHELF = 2
    ENTRANCE = 3
    CHECKOUT = 4


KIND_CHARS = {
    ".": CellKind.FLOOR,
    "#": CellKind.WALL,
    "S": CellKind.SHELF,
    "E": CellKind.ENTRANCE,
    "C": CellKind.CHECKOUT,
}
KIND_TO_CHAR = {v: k for k, v in KIND_CHARS.items()}


class Orientation(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def delta(self) -> Cell:
        return DIRECTION_DELTAS[self]

    def turned_right(self) -> Orientation:
        return Orientation((self + 1) % 4)

    def turned_left(self) -> Orientation:
        return Orientation((self - 1) % 4)


# Neighbour order N, E, S, W is the deterministic tie-break everywhere.
DIRECTION_DELTAS: tuple[Cell, ...] = ((0, -1), (1, 0), (0, 1), (-1, 0))


def step(cell: Cell, facing: int) -> Cell:
    dx, dy = DIRECTION_DELTAS[facing]
    return (cell[0] + dx, cell[1] + dy)


def direction_between(a: Cell, b: Cell) -> Orientation:
    """Orientation of the unit move ``a -> b``."""
    delta = (b[0] - a[0], b[1] - a[1])
    try:
        return Orientation(DIRECTION_DELTAS.index(delta))
    except ValueError:
        raise ValueError(f"cells {a} and {b} are not 4-adjacent") from None


class LayoutError(ValueError):
    """Raised when a layout document or edit violates the store invariants.

    ``issues`` holds ``(message, cell)`` pairs; ``cell`` is ``None`` for
    document-level problems.
    """

    def __init__(self, issues: list[tuple[str, Cell | None]]):
        self.issues = list(issues)
        lines = [msg if cell is None else f"{msg} at {cell}" for msg, cell in self.issues]
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class Category:
    id: str
    name: str
    price: float = 0.0
    margin: float = 0.05

    @property
    def per_unit_profit(self) -> float:
        return self.price * self.margin


@dataclass(frozen=True)
class ProductProfile:
    """Pricing and impulse behaviour of one product category.

    ``impulse_rate`` is a ratio, not a probability: it may exceed 1 and is
    ``math.inf`` when purchases were seen without any shelf visit.
    """

    category_id: str
    price: float
    margin: float
    impulse_rate: float = 0.0

    def __post_init__(self):
        if self.price < 0:
            raise ValueError(f"price must be non-negative, got {self.price}")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must lie in [0, 1], got {self.margin}")

    @property
    def per_unit_profit(self) -> float:
        return self.price * self.margin


@dataclass(frozen=True)
class Basket:
    """Shopping conditions: items to collect, checkout to use, optional step budget."""

    items: frozenset[str]
    checkout: Cell
    budget: int | None = None

    def __init__(self, items: Iterable[str], checkout: Iterable[int], budget: int | None = None):
        object.__setattr__(self, "items", frozenset(items))
        object.__setattr__(self, "checkout", tuple(int(v) for v in checkout))
        object.__setattr__(self, "budget", None if budget is None else int(budget))

    @property
    def ordered_items(self) -> tuple[str, ...]:
        return tuple(sorted(self.items))

    def to_dict(self) -> dict:
        return {
            "items": sorted(self.items),
            "checkout": list(self.checkout),
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> Basket:
        return cls(data["items"], data["checkout"], data.get("budget"))


@dataclass(frozen=True)
class Layout:
    width: int
    height: int
    grid: tuple[str, ...]
    entrance: Cell
    checkout_ids: tuple[Cell, ...]
    categories: tuple[Category, ...]
    placements: Mapping[Cell, str] = field(default_factory=dict)
    cell_size: float = DEFAULT_CELL_SIZE
    entrance_facing: Orientation = Orientation.N
    name: str = ""
    notes: str = ""

    def __post_init__(self):
        object.__setattr__(self, "placements", dict(sorted(self.placements.items(), key=lambda kv: (kv[0][1], kv[0][0]))))
        issues = _validate(self)
        if issues:
            raise LayoutError(issues)

    def __hash__(self):
        return hash(self.content_hash)

    # -- grid views -------------------------------------------------------

    @cached_property
    def kinds(self) -> np.ndarray:
        """``(height, width)`` array of :class:`CellKind` codes."""
        arr = np.array([[KIND_CHARS[ch] for ch in row] for row in self.grid], dtype=np.int8)
        arr.setflags(write=False)
        return arr

    @property
    def cells(self) -> np.ndarray:
        return self.kinds

    @cached_property
    def walkable(self) -> np.ndarray:
        mask = (self.kinds == CellKind.FLOOR) | (self.kinds == CellKind.ENTRANCE)
        mask.setflags(write=False)
        return mask

    @property
    def category_names(self) -> list[str]:
        return [c.name for c in self.categories]

    @cached_property
    def category_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.categories)

    def category(self, category_id: str) -> Category:
        for cat in self.categories:
            if cat.id == category_id:
                return cat
        raise KeyError(category_id)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def kind(self, cell: Cell) -> CellKind:
        return CellKind(int(self.kinds[cell[1], cell[0]]))

    def is_walkable(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and bool(self.walkable[cell[1], cell[0]])

    def neighbours(self, cell: Cell) -> list[Cell]:
        """Walkable 4-neighbours in N, E, S, W order."""
        out = []
        for d in range(4):
            nb = step(cell, d)
            if self.is_walkable(nb):
                out.append(nb)
        return out

    @cached_property
    def walkable_cells(self) -> tuple[Cell, ...]:
        """Walkable cells in (row, column) scan order."""
        ys, xs = np.nonzero(self.walkable)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))

    @cached_property
    def walkable_index(self) -> dict[Cell, int]:
        return {c: i for i, c in enumerate(self.walkable_cells)}

    @cached_property
    def shelf_cells(self) -> tuple[Cell, ...]:
        """All shelf cells in (row, column) scan order."""
        ys, xs = np.nonzero(self.kinds == CellKind.SHELF)
        return tuple((int(x), int(y)) for y, x in zip(ys, xs))

    @cached_property
    def shelf_index(self) -> dict[Cell, int]:
        return {c: i for i, c in enumerate(self.shelf_cells)}

    def unoccupied_shelves(self) -> list[Cell]:
        return [c for c in self.shelf_cells if c not in self.placements]

    def category_shelves(self, category_id: str) -> list[Cell]:
        return [c for c, cat in self.placements.items() if cat == category_id]

    def approach_cells(self, targets: Iterable[Cell]) -> list[Cell]:
        """Walkable cells 4-adjacent to any of ``targets``, scan order."""
        targets = set(targets)
        out = set()
        for t in targets:
            for d in range(4):
                nb = step(t, d)
                if self.is_walkable(nb):
                    out.add(nb)
        return sorted(out, key=lambda c: (c[1], c[0]))

    def category_approach_cells(self, category_id: str) -> list[Cell]:
        return self.approach_cells(self.category_shelves(category_id))

    def checkout_approach_cells(self, checkout: Cell) -> list[Cell]:
        return self.approach_cells([checkout])

    @cached_property
    def shelf_adjacency(self) -> np.ndarray:
        """Boolean ``(n_walkable, n_shelves)`` matrix: walkable cell touches shelf."""
        adj = np.zeros((len(self.walkable_cells), len(self.shelf_cells)), dtype=bool)
        for j, shelf in enumerate(self.shelf_cells):
            for d in range(4):
                nb = step(shelf, d)
                i = self.walkable_index.get(nb)
                if i is not None:
                    adj[i, j] = True
        adj.setflags(write=False)
        return adj

    def flat_index(self, cell: Cell) -> int:
        return cell[1] * self.width + cell[0]

    @cached_property
    def content_hash(self) -> str:
        return hashlib.sha256(dump_layout(self).encode()).hexdigest()


# -- validation ---------------------------------------------------------------


def _validate(layout: Layout) -> list[tuple[str, Cell | None]]:
    issues: list[tuple[str, Cell | None]] = []
    if layout.width <= 0 or layout.height <= 0:
        return [(f"dimensions must be positive, got {layout.width}x{layout.height}", None)]
    if layout.cell_size <= 0:
        issues.append((f"cell size must be positive, got {layout.cell_size}", None))
    if len(layout.grid) != layout.height:
        return [(f"grid has {len(layout.grid)} rows, expected {layout.height}", None)]
    for y, row in enumerate(layout.grid):
        if len(row) != layout.width:
            issues.append((f"grid row {y} has {len(row)} cells, expected {layout.width}", (0, y)))
        for x, ch in enumerate(row):
            if ch not in KIND_CHARS:
                issues.append((f"unknown cell character {ch!r}", (x, y)))
    if issues:
        return issues

    def kind_at(c):
        return KIND_CHARS[layout.grid[c[1]][c[0]]]

    def inside(c):
        return 0 <= c[0] < layout.width and 0 <= c[1] < layout.height

    entrances = [(x, y) for y, row in enumerate(layout.grid) for x, ch in enumerate(row) if ch == "E"]
    if len(entrances) != 1:
        issues.append((f"expected exactly one entrance cell in grid, found {len(entrances)}", None))
    if not inside(layout.entrance):
        issues.append(("entrance out of bounds", layout.entrance))
    elif kind_at(layout.entrance) != CellKind.ENTRANCE:
        issues.append((f"entrance cell holds {kind_at(layout.entrance).name.lower()}", layout.entrance))

    if not layout.checkout_ids:
        issues.append(("at least one checkout required", None))
    grid_checkouts = {(x, y) for y, row in enumerate(layout.grid) for x, ch in enumerate(row) if ch == "C"}
    for c in layout.checkout_ids:
        if not inside(c):
            issues.append(("checkout out of bounds", c))
        elif kind_at(c) != CellKind.CHECKOUT:
            issues.append((f"checkout cell holds {kind_at(c).name.lower()}", c))
        elif not any(inside(step(c, d)) and kind_at(step(c, d)) in (CellKind.FLOOR, CellKind.ENTRANCE) for d in range(4)):
            issues.append(("checkout has no walkable neighbour", c))
    for c in sorted(grid_checkouts - set(layout.checkout_ids), key=lambda c: (c[1], c[0])):
        issues.append(("checkout cell missing from checkout list", c))
    if len(set(layout.checkout_ids)) != len(layout.checkout_ids):
        issues.append(("duplicate checkout entry", None))

    ids = [c.id for c in layout.categories]
    if len(set(ids)) != len(ids):
        issues.append(("duplicate category id", None))
    for cat in layout.categories:
        if cat.price < 0:
            issues.append((f"category {cat.id!r} has negative price", None))
        if not 0 <= cat.margin <= 1:
            issues.append((f"category {cat.id!r} margin outside [0, 1]", None))
    known = set(ids)
    for cell, cat in layout.placements.items():
        if cat not in known:
            issues.append((f"unknown category id {cat!r}", cell))
        if not inside(cell):
            issues.append((f"placement of {cat!r} out of bounds", cell))
        elif kind_at(cell) != CellKind.SHELF:
            issues.append((f"placement of {cat!r} on {kind_at(cell).name.lower()} cell", cell))
    if issues:
        return issues

    # every floor cell reachable from the entrance (4-connected)
    walk = {(x, y) for y, row in enumerate(layout.grid) for x, ch in enumerate(row) if ch in ".E"}
    seen = {layout.entrance}
    queue = deque([layout.entrance])
    while queue:
        cur = queue.popleft()
        for d in range(4):
            nb = step(cur, d)
            if nb in walk and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    for c in sorted(walk - seen, key=lambda c: (c[1], c[0])):
        issues.append(("floor cell unreachable from entrance", c))
    return issues


# -- serialization ------------------------------------------------------------

_TOP_KEYS = {
    "version", "name", "notes", "width", "height", "cell_size_m", "grid",
    "entrance", "entrance_facing", "checkouts", "categories", "placements",
}
_REQUIRED = {"version", "width", "height", "grid", "entrance", "checkouts", "categories"}
_CATEGORY_KEYS = {"id", "name", "price", "margin"}


def _cell(value, what: str) -> Cell:
    if not (isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value)):
        raise LayoutError([(f"{what} must be a [column, row] integer pair, got {value!r}", None)])
    return (int(value[0]), int(value[1]))


def layout_from_dict(doc: Mapping) -> Layout:
    if not isinstance(doc, Mapping):
        raise LayoutError([("layout document must be a mapping", None)])
    unknown = set(doc) - _TOP_KEYS
    missing = _REQUIRED - set(doc)
    issues = [(f"unknown field {k!r}", None) for k in sorted(unknown)]
    issues += [(f"missing field {k!r}", None) for k in sorted(missing)]
    if issues:
        raise LayoutError(issues)
    if doc["version"] != FORMAT_VERSION:
        raise LayoutError([(f"unsupported layout version {doc['version']!r}", None)])

    categories = []
    for entry in doc["categories"]:
        extra = set(entry) - _CATEGORY_KEYS
        if extra or "id" not in entry:
            raise LayoutError([(f"bad category entry {entry!r}", None)])
        categories.append(Category(
            id=str(entry["id"]),
            name=str(entry.get("name", entry["id"])),
            price=float(entry.get("price", 0.0)),
            margin=float(entry.get("margin", 0.05)),
        ))

    placements: dict[Cell, str] = {}
    dup: list[tuple[str, Cell | None]] = []
    for cat, cells in (doc.get("placements") or {}).items():
        for raw in cells:
            cell = _cell(raw, f"placement of {cat!r}")
            if cell in placements:
                dup.append((f"shelf holds both {placements[cell]!r} and {cat!r}", cell))
            placements[cell] = str(cat)
    if dup:
        raise LayoutError(dup)

    facing = doc.get("entrance_facing", "N")
    if facing not in Orientation.__members__:
        raise LayoutError([(f"entrance_facing must be one of N/E/S/W, got {facing!r}", None)])

    return Layout(
        width=int(doc["width"]),
        height=int(doc["height"]),
        grid=tuple(str(r) for r in doc["grid"]),
        entrance=_cell(doc["entrance"], "entrance"),
        checkout_ids=tuple(_cell(c, "checkout") for c in doc["checkouts"]),
        categories=tuple(categories),
        placements=placements,
        cell_size=float(doc.get("cell_size_m", DEFAULT_CELL_SIZE)),
        entrance_facing=Orientation[facing],
        name=str(doc.get("name", "")),
        notes=str(doc.get("notes", "")),
    )


def load_layout(source: str | Path) -> Layout:
    """Parse a layout from YAML text, or from a file when given a ``Path``."""
    text = source.read_text() if isinstance(source, Path) else source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise LayoutError([(f"layout document does not parse: {exc}", None)]) from exc
    return layout_from_dict(doc)


def layout_to_dict(layout: Layout) -> dict:
    by_cat: dict[str, list[list[int]]] = {}
    for cell, cat in layout.placements.items():
        by_cat.setdefault(cat, []).append([cell[0], cell[1]])
    doc = {
        "version": FORMAT_VERSION,
        "name": layout.name,
        "width": layout.width,
        "height": layout.height,
        "cell_size_m": layout.cell_size,
        "entrance": list(layout.entrance),
        "entrance_facing": layout.entrance_facing.name,
        "checkouts": [list(c) for c in layout.checkout_ids],
        "categories": [
            {"id": c.id, "name": c.name, "price": c.price, "margin": c.margin}
            for c in layout.categories
        ],
        "placements": {cat: by_cat[cat] for cat in layout.category_ids if cat in by_cat},
        "grid": list(layout.grid),
    }
    if layout.notes:
        doc["notes"] = layout.notes
    return doc


def dump_layout(layout: Layout) -> str:
    return yaml.safe_dump(layout_to_dict(layout), sort_keys=False, default_flow_style=None, width=200)


# -- edits --------------------------------------------------------------------


def reposition(layout: Layout, category: str, target_shelves: Iterable[Cell], vacate: bool = True) -> Layout:
    """Return a copy of ``layout`` with ``category`` placed on ``target_shelves``.

    By default the category is moved: its previous shelves become unoccupied.
    Targets must be empty shelf cells or shelves already holding ``category``.
    """
    if category not in layout.category_ids:
        raise LayoutError([(f"unknown category id {category!r}", None)])
    targets = [tuple(t) for t in target_shelves]
    issues = []
    for t in targets:
        if not layout.in_bounds(t) or layout.kind(t) != CellKind.SHELF:
            issues.append(("target is not a shelf cell", t))
        elif layout.placements.get(t, category) != category:
            issues.append((f"target shelf occupied by {layout.placements[t]!r}", t))
    if issues:
        raise LayoutError(issues)
    placements = dict(layout.placements)
    if vacate:
        placements = {c: p for c, p in placements.items() if p != category}
    for t in targets:
        placements[t] = category
    return replace(layout, placements=placements)


def price_profiles(layout: Layout, rates: Mapping[str, float] | None = None) -> dict[str, ProductProfile]:
    rates = rates or {}
    return {
        c.id: ProductProfile(c.id, c.price, c.margin, rates.get(c.id, 0.0))
        for c in layout.categories
    }


def is_finite_rate(rate: float) -> bool:
    return not math.isinf(rate) and not math.isnan(rate)
