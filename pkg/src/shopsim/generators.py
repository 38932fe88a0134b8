"""Heuristic and synthetic trajectory generators.

* :func:`gen_tsp` -- globally shortest entrance -> items -> checkout route,
  solved exactly with Held-Karp over every candidate approach cell.
* :func:`gen_pnn` -- probabilistic nearest neighbour: the next item is drawn
  with probability proportional to ``1 / distance``.
* :func:`gen_noisy_human` -- PNN ordering with randomised near-shortest
  segments; the detour spread is calibrated to a target mean excess length.
  It stands in for ground-truth customer data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np

from .layout import Basket, Cell, Layout
from .nav import Navigator, NoPathError
from .parallel import ordered_map, stream
from .trajectory import Trajectory, trajectory_from_route

HELD_KARP_CAP = 15
METHODS = ("tsp", "pnn", "noisy_human")


class GenerationError(ValueError):
    pass


class BasketTooLargeError(GenerationError):
    pass


class UnreachableItemError(GenerationError):
    pass


class CalibrationError(GenerationError):
    def __init__(self, message: str, achieved_ratio: float):
        super().__init__(f"{message} (achieved ratio {achieved_ratio:.4f})")
        self.achieved_ratio = achieved_ratio


@dataclass(frozen=True)
class GenerationRequest:
    method: str
    basket: Basket
    count: int
    seed: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def _item_candidates(layout: Layout, basket: Basket) -> list[list[Cell]]:
    cands = []
    for item in basket.ordered_items:
        if item not in layout.category_ids:
            raise UnreachableItemError(f"unknown item {item!r}")
        cells = layout.category_approach_cells(item)
        if not cells:
            raise UnreachableItemError(f"item {item!r} has no reachable shelf")
        cands.append(cells)
    if basket.checkout not in layout.checkout_ids:
        raise GenerationError(f"{basket.checkout} is not a checkout")
    return cands


def _stitch(nav: Navigator, waypoints: Sequence[Cell], segment) -> tuple[list[Cell], list[int]]:
    """Concatenate per-leg paths; returns the route and the route index of each waypoint."""
    route = [waypoints[0]]
    marks = [0]
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        leg = segment(a, b)
        route.extend(leg[1:])
        marks.append(len(route) - 1)
    return route, marks


# -- TSP ---------------------------------------------------------------------


@dataclass(frozen=True)
class TourPlan:
    length: float
    stops: tuple[tuple[str, Cell], ...]  # (item, approach cell) in visiting order
    end: Cell


def solve_tour(layout: Layout, basket: Basket, cap: int = HELD_KARP_CAP) -> TourPlan:
    """Held-Karp over the expanded node set (one approach cell chosen per item)."""
    items = basket.ordered_items
    k = len(items)
    if k > cap:
        raise BasketTooLargeError(f"basket of {k} items exceeds exact-solver cap {cap}")
    cands = _item_candidates(layout, basket)
    nav = Navigator.for_layout(layout)
    ends = layout.checkout_approach_cells(basket.checkout)

    def end_cost(cell):
        dist = nav.field(cell).dist
        return min(dist[e[1], e[0]] for e in ends)

    if k == 0:
        end, d = nav.nearest(layout.entrance, ends)
        return TourPlan(d, (), end)

    node_cell = [c for cs in cands for c in cs]
    node_item = np.array([i for i, cs in enumerate(cands) for _ in cs])
    n = len(node_cell)
    start_field = nav.field(layout.entrance).dist
    d_start = np.array([start_field[c[1], c[0]] for c in node_cell])
    dmat = np.empty((n, n))
    for i, c in enumerate(node_cell):
        f = nav.field(c).dist
        dmat[i] = [f[o[1], o[0]] for o in node_cell]
    d_end = np.array([end_cost(c) for c in node_cell])
    if np.isinf(d_start).all() or np.isinf(d_end).all():
        raise UnreachableItemError("basket items unreachable")
    members = [np.flatnonzero(node_item == i) for i in range(k)]

    full = (1 << k) - 1
    dp = np.full((1 << k, n), np.inf)
    parent = np.full((1 << k, n), -1, dtype=np.int64)
    for i in range(k):
        dp[1 << i, members[i]] = d_start[members[i]]
    for mask in range(1, full):
        row = dp[mask]
        live = np.flatnonzero(np.isfinite(row))
        if live.size == 0:
            continue
        for j in range(k):
            if mask >> j & 1:
                continue
            cand = row[live, None] + dmat[np.ix_(live, members[j])]
            best = np.argmin(cand, axis=0)
            nxt = mask | (1 << j)
            dp[nxt, members[j]] = cand[best, np.arange(len(members[j]))]
            parent[nxt, members[j]] = live[best]
    total = dp[full] + d_end
    last = int(np.argmin(total))
    if not np.isfinite(total[last]):
        raise UnreachableItemError("no feasible tour")
    order = []
    mask, node = full, last
    while node >= 0:
        order.append(node)
        prev = parent[mask, node]
        mask ^= 1 << int(node_item[node])
        node = int(prev)
    order.reverse()
    last_cell = node_cell[order[-1]]
    end, _ = nav.nearest(last_cell, ends)
    stops = tuple((items[int(node_item[o])], node_cell[o]) for o in order)
    return TourPlan(float(total[last]), stops, end)


def gen_tsp(layout: Layout, basket: Basket) -> Trajectory:
    plan = solve_tour(layout, basket)
    nav = Navigator.for_layout(layout)
    waypoints = [layout.entrance] + [c for _, c in plan.stops] + [plan.end]
    route, marks = _stitch(nav, waypoints, nav.shortest_path)
    pickups = [(marks[i + 1], item) for i, (item, _) in enumerate(plan.stops)]
    return trajectory_from_route(layout, route, pickups, basket, method="tsp")


def tsp_length(layout: Layout, basket: Basket) -> int:
    return int(solve_tour(layout, basket).length)


# -- PNN ---------------------------------------------------------------------


def pnn_choices(layout: Layout, current: Cell, remaining: Sequence[str]) -> tuple[list[str], list[Cell], np.ndarray]:
    """Next-item probabilities from ``current``: ``p_j`` proportional to ``1/d_j``.

    ``d_j`` is the shortest-path distance to item ``j``'s nearest approach
    cell.  Items already within reach (``d = 0``) share all the probability.
    """
    nav = Navigator.for_layout(layout)
    targets, dists = [], []
    for item in remaining:
        cells = layout.category_approach_cells(item)
        if not cells:
            raise UnreachableItemError(f"item {item!r} has no reachable shelf")
        cell, d = nav.nearest(current, cells)
        targets.append(cell)
        dists.append(d)
    dists = np.array(dists, dtype=float)
    if (dists == 0).any():
        probs = (dists == 0).astype(float)
    else:
        probs = 1.0 / dists
    return list(remaining), targets, probs / probs.sum()


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    if len(probs) == 1:
        return 0
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def pnn_skeleton(layout: Layout, basket: Basket, rng: np.random.Generator) -> tuple[list[Cell], list[str]]:
    """Waypoints (entrance, item approach cells, checkout approach cell) in PNN order."""
    _item_candidates(layout, basket)
    nav = Navigator.for_layout(layout)
    cur = layout.entrance
    remaining = list(basket.ordered_items)
    waypoints, order = [cur], []
    while remaining:
        items, targets, probs = pnn_choices(layout, cur, remaining)
        j = _draw(probs, rng)
        cur = targets[j]
        waypoints.append(cur)
        order.append(items[j])
        remaining.remove(items[j])
    end, _ = nav.nearest(cur, layout.checkout_approach_cells(basket.checkout))
    waypoints.append(end)
    return waypoints, order


def gen_pnn(layout: Layout, basket: Basket, rng: np.random.Generator) -> Trajectory:
    nav = Navigator.for_layout(layout)
    waypoints, order = pnn_skeleton(layout, basket, rng)
    route, marks = _stitch(nav, waypoints, nav.shortest_path)
    pickups = [(marks[i + 1], item) for i, item in enumerate(order)]
    return trajectory_from_route(layout, route, pickups, basket, method="pnn")


# -- synthetic humans ------------------------------------------------------------


def segment_excess(nav: Navigator, walkable: Sequence[Cell], a: Cell, b: Cell) -> np.ndarray:
    """Extra steps incurred by routing ``a -> v -> b`` for every walkable ``v``."""
    fa = nav.field(a).dist
    fb = nav.field(b).dist
    xs = np.array([c[0] for c in walkable])
    ys = np.array([c[1] for c in walkable])
    return fa[ys, xs] + fb[ys, xs] - fa[b[1], b[0]]


def _via_weights(excess: np.ndarray, spread: float) -> np.ndarray:
    if spread <= 0:
        w = (excess == 0).astype(float)
    else:
        # tiny spreads overflow to exp(-inf) = 0; the zero-excess cells keep weight 1
        with np.errstate(over="ignore"):
            w = np.exp(-excess / spread)
    return w / w.sum()


def expected_excess(excess: np.ndarray, spread: float) -> float:
    return float(_via_weights(excess, spread) @ excess)


@dataclass(frozen=True)
class HumanModel:
    """Calibrated synthetic-customer parameters."""

    spread: float
    detour_target: float
    achieved_ratio: float


def gen_noisy_human(layout: Layout, basket: Basket, rng: np.random.Generator, model: HumanModel | float) -> Trajectory:
    """PNN-ordered trip whose legs detour through a randomly drawn via-cell.

    The via-cell ``v`` of leg ``a -> b`` is drawn with weight
    ``exp(-(d(a,v) + d(v,b) - d(a,b)) / spread)``; both halves then follow a
    uniformly-branching shortest path.
    """
    spread = model.spread if isinstance(model, HumanModel) else float(model)
    nav = Navigator.for_layout(layout)
    walk = layout.walkable_cells
    waypoints, order = pnn_skeleton(layout, basket, rng)

    def leg(a, b):
        probs = _via_weights(segment_excess(nav, walk, a, b), spread)
        v = walk[_draw(probs, rng)]
        first = nav.random_shortest_path(a, v, rng)
        return first + nav.random_shortest_path(v, b, rng)[1:]

    route, marks = _stitch(nav, waypoints, leg)
    pickups = [(marks[i + 1], item) for i, item in enumerate(order)]
    return trajectory_from_route(layout, route, pickups, basket, method="noisy_human")


def calibrate_human(
    layout: Layout,
    baskets: Sequence[Basket],
    detour_target: float,
    seed: int = 0,
    batch: int = 400,
    tol: float = 0.005,
    spread_bounds: tuple[float, float] = (1e-3, 1e3),
) -> HumanModel:
    """Find the via-cell spread giving mean length ratio ``1 + detour_target`` vs TSP.

    A batch of PNN skeletons is drawn once; the expected excess of each leg is
    then exact for any spread, so the ratio is a smooth increasing function of
    the spread and bisection is deterministic.
    """
    if detour_target < 0:
        raise ValueError("detour_target must be non-negative")
    if not baskets:
        raise ValueError("calibration needs at least one basket")
    nav = Navigator.for_layout(layout)
    walk = layout.walkable_cells
    rng = stream(seed, 0xCA11B)
    tsp_cache: dict[Basket, float] = {}
    base, legs, ref = [], [], []
    for i in range(batch):
        basket = baskets[i % len(baskets)]
        if basket not in tsp_cache:
            tsp_cache[basket] = solve_tour(layout, basket).length
        if tsp_cache[basket] <= 0:
            continue
        waypoints, _ = pnn_skeleton(layout, basket, rng)
        base.append(sum(nav.distance(a, b) for a, b in zip(waypoints[:-1], waypoints[1:])))
        legs.append([segment_excess(nav, walk, a, b) for a, b in zip(waypoints[:-1], waypoints[1:])])
        ref.append(tsp_cache[basket])
    if not base:
        raise CalibrationError("every calibration basket has a zero-length TSP route", 1.0)
    base = np.array(base)
    ref = np.array(ref)

    def ratio(spread: float) -> float:
        extra = np.array([sum(expected_excess(e, spread) for e in trip) for trip in legs])
        return float(np.mean((base + extra) / ref))

    target = 1.0 + detour_target
    r0 = ratio(0.0)
    if r0 >= target - tol:
        if r0 > target + tol:
            raise CalibrationError("shortest-leg routes already exceed the target ratio", r0)
        return HumanModel(0.0, detour_target, r0)
    lo, hi = spread_bounds
    r_hi = ratio(hi)
    if r_hi < target - tol:
        raise CalibrationError("target ratio not reachable within spread bounds", r_hi)
    if ratio(lo) > target:
        return HumanModel(lo, detour_target, ratio(lo))
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if ratio(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-9:
            break
    spread = math.sqrt(lo * hi)
    return HumanModel(spread, detour_target, ratio(spread))


# -- batches -------------------------------------------------------------------


def upsample(trajs: Sequence[Trajectory], target: int, rng: np.random.Generator) -> list[Trajectory]:
    """Draw exactly ``target`` trajectories i.i.d. with replacement."""
    if not trajs:
        raise ValueError("cannot upsample an empty trajectory set")
    if target < 1:
        raise ValueError("target must be at least 1")
    idx = rng.integers(0, len(trajs), size=target)
    return [trajs[i] for i in idx]


def _one(index: int, layout: Layout, method: str, basket: Basket, seed: int, model) -> Trajectory:
    rng = stream(seed, index)
    if method == "pnn":
        return gen_pnn(layout, basket, rng)
    return gen_noisy_human(layout, basket, rng, model)


def generate(
    layout: Layout,
    request: GenerationRequest,
    model: HumanModel | None = None,
    workers: int = 1,
) -> list[Trajectory]:
    """Produce ``request.count`` trajectories; trajectory ``i`` uses stream ``(seed, i)``."""
    if request.method == "tsp":
        return [gen_tsp(layout, request.basket)] * request.count
    if request.method == "noisy_human" and model is None:
        raise ValueError("noisy_human generation needs a calibrated HumanModel")
    fn = partial(_one, layout=layout, method=request.method, basket=request.basket, seed=request.seed, model=model)
    return ordered_map(fn, range(request.count), workers)
