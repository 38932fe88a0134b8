"""Trajectories as (state, action) sequences over the store grid.

A state is a cell plus the orientation the customer faces.  The action set is
move forward, turn left, turn right, and a combined pickup/checkout action that
acts on the cell being faced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .layout import Basket, Cell, CellKind, Layout, Orientation, direction_between, step


class Action(IntEnum):
    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    PICKUP = 3  # pickup when facing a shelf, checkout when facing a checkout

    @property
    def label(self) -> str:
        return ACTION_LABELS[self]


ACTION_LABELS = {
    Action.FORWARD: "forward",
    Action.LEFT: "left",
    Action.RIGHT: "right",
    Action.PICKUP: "pickup_or_checkout",
}
LABEL_TO_ACTION = {v: k for k, v in ACTION_LABELS.items()}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One shopping trip.

    ``states[i]`` is ``(x, y, facing)`` before ``actions[i]`` is taken.
    ``pickups`` holds ``(step index, category id)`` pairs.
    """

    states: np.ndarray
    actions: np.ndarray
    conditions: Basket
    pickups: tuple[tuple[int, str], ...] = ()
    flags: tuple[str, ...] = ()
    method: str = ""

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=np.int16).reshape(-1, 3)
        actions = np.ascontiguousarray(self.actions, dtype=np.int8).reshape(-1)
        if len(states) != len(actions):
            raise ValueError("states and actions differ in length")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "pickups", tuple((int(i), str(c)) for i, c in self.pickups))
        object.__setattr__(self, "flags", tuple(self.flags))

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and self.conditions == other.conditions
            and self.pickups == other.pickups
            and self.flags == other.flags
            and self.method == other.method
        )

    __hash__ = None

    @property
    def steps(self) -> list[tuple[tuple[Cell, Orientation], Action]]:
        return [
            (((int(x), int(y)), Orientation(int(f))), Action(int(a)))
            for (x, y, f), a in zip(self.states, self.actions)
        ]

    @property
    def cells(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def route_length(self) -> int:
        """Number of cell-to-cell moves (turns and pickups excluded)."""
        if len(self.states) < 2:
            return 0
        moved = np.any(self.states[1:, :2] != self.states[:-1, :2], axis=1)
        return int(moved.sum())

    def route(self) -> list[Cell]:
        """Visited cells with consecutive duplicates collapsed."""
        out: list[Cell] = []
        for x, y in self.cells:
            c = (int(x), int(y))
            if not out or out[-1] != c:
                out.append(c)
        return out

    def with_pickups(self, pickups: Iterable[tuple[int, str]], flags: Iterable[str] = ()) -> Trajectory:
        return Trajectory(self.states, self.actions, self.conditions, tuple(pickups), tuple(self.flags) + tuple(flags), self.method)


# -- dynamics ----------------------------------------------------------------


def advance(layout: Layout, cell: Cell, facing: int, action: int) -> tuple[Cell, int]:
    """Deterministic grid step; forward into a non-walkable cell stays put."""
    if action == Action.FORWARD:
        nxt = step(cell, facing)
        return (nxt if layout.is_walkable(nxt) else cell), facing
    if action == Action.LEFT:
        return cell, (facing - 1) % 4
    if action == Action.RIGHT:
        return cell, (facing + 1) % 4
    return cell, facing


@dataclass
class EpisodeSummary:
    collected: set[str] = field(default_factory=set)
    wrong_pickups: int = 0
    checkout: Cell | None = None
    steps: int = 0


def summarize(traj: Trajectory, layout: Layout) -> EpisodeSummary:
    """Replay pickup/checkout actions to recover what an episode achieved."""
    out = EpisodeSummary(steps=len(traj))
    basket = traj.conditions.items
    for (x, y, f), a in zip(traj.states, traj.actions):
        if a != Action.PICKUP:
            continue
        front = step((int(x), int(y)), int(f))
        if not layout.in_bounds(front):
            continue
        kind = layout.kind(front)
        if kind == CellKind.CHECKOUT:
            out.checkout = front
            break
        if kind == CellKind.SHELF and front in layout.placements:
            cat = layout.placements[front]
            if cat in basket:
                out.collected.add(cat)
            else:
                out.wrong_pickups += 1
    return out


def check_trajectory(traj: Trajectory, layout: Layout, step_limit: int | None = None) -> list[str]:
    """Return the list of invariant violations (empty when valid)."""
    problems = []
    if len(traj) == 0:
        return ["empty trajectory"]
    x, y, f = (int(v) for v in traj.states[0])
    if (x, y) != layout.entrance:
        problems.append(f"starts at {(x, y)}, not the entrance {layout.entrance}")
    if traj.conditions.checkout not in layout.checkout_ids:
        problems.append(f"conditioned checkout {traj.conditions.checkout} is not a checkout")
    unknown = traj.conditions.items - set(layout.category_ids)
    if unknown:
        problems.append(f"unknown basket items {sorted(unknown)}")
    for i in range(len(traj)):
        cell = (int(traj.states[i, 0]), int(traj.states[i, 1]))
        facing = int(traj.states[i, 2])
        if not layout.is_walkable(cell):
            problems.append(f"step {i} stands on non-walkable cell {cell}")
            break
        if i + 1 < len(traj):
            nxt_cell, nxt_f = advance(layout, cell, facing, int(traj.actions[i]))
            got = (int(traj.states[i + 1, 0]), int(traj.states[i + 1, 1]))
            if got != nxt_cell or int(traj.states[i + 1, 2]) != nxt_f:
                problems.append(f"step {i}->{i + 1} inconsistent with action {Action(int(traj.actions[i])).label}")
                break
            if traj.actions[i] == Action.PICKUP:
                front = step(cell, facing)
                if layout.in_bounds(front) and layout.kind(front) == CellKind.CHECKOUT:
                    problems.append(f"checkout at step {i} before the end")
                    break
    last_cell = (int(traj.states[-1, 0]), int(traj.states[-1, 1]))
    front = step(last_cell, int(traj.states[-1, 2]))
    ended_at_checkout = (
        traj.actions[-1] == Action.PICKUP
        and layout.in_bounds(front)
        and layout.kind(front) == CellKind.CHECKOUT
    )
    if not ended_at_checkout and (step_limit is None or len(traj) < step_limit):
        problems.append("does not end with a checkout action or at the step limit")
    for idx, _ in traj.pickups:
        if not 0 <= idx < len(traj):
            problems.append(f"pickup step {idx} out of range")
    return problems


# -- route -> actions ----------------------------------------------------------


def turns_between(facing: int, target: int) -> list[Action]:
    """Shortest rotation from ``facing`` to ``target`` (half turns go right)."""
    diff = (target - facing) % 4
    return {0: [], 1: [Action.RIGHT], 2: [Action.RIGHT, Action.RIGHT], 3: [Action.LEFT]}[diff]


def _face_towards(cell: Cell, facing: int, targets: set[Cell]) -> int:
    best, best_cost = None, None
    for d in range(4):
        if step(cell, d) in targets:
            cost = len(turns_between(facing, d))
            if best_cost is None or cost < best_cost:
                best, best_cost = d, cost
    if best is None:
        raise ValueError(f"cell {cell} is not adjacent to {sorted(targets)}")
    return best


class _Builder:
    def __init__(self, cell: Cell, facing: int):
        self.cell = cell
        self.facing = int(facing)
        self.states: list[tuple[int, int, int]] = []
        self.actions: list[int] = []

    def act(self, action: Action):
        self.states.append((self.cell[0], self.cell[1], self.facing))
        self.actions.append(int(action))
        if action == Action.LEFT:
            self.facing = (self.facing - 1) % 4
        elif action == Action.RIGHT:
            self.facing = (self.facing + 1) % 4

    def turn_to(self, target: int):
        for a in turns_between(self.facing, target):
            self.act(a)

    def move_to(self, nxt: Cell):
        self.turn_to(direction_between(self.cell, nxt))
        self.act(Action.FORWARD)
        self.cell = nxt


def trajectory_from_route(
    layout: Layout,
    route: Sequence[Cell],
    pickups: Sequence[tuple[int, str]],
    basket: Basket,
    method: str = "",
    checkout: bool = True,
    facing: int | None = None,
) -> Trajectory:
    """Convert a cell route into a minimal action sequence.

    ``pickups`` are ``(route index, category)`` pairs; at that route cell the
    customer turns to face a shelf of the category and picks up.  When
    ``checkout`` is true the route must end next to ``basket.checkout``, which
    is faced and used as the final action.  Repeated consecutive cells are
    treated as standing still.
    """
    if not route:
        raise ValueError("empty route")
    b = _Builder(tuple(route[0]), layout.entrance_facing if facing is None else facing)
    by_index: dict[int, list[str]] = {}
    for idx, cat in pickups:
        by_index.setdefault(int(idx), []).append(cat)
    recorded = []
    for i, cell in enumerate(route):
        cell = tuple(cell)
        if i > 0 and cell != b.cell:
            b.move_to(cell)
        for cat in by_index.get(i, ()):
            b.turn_to(_face_towards(b.cell, b.facing, set(layout.category_shelves(cat))))
            recorded.append((len(b.actions), cat))
            b.act(Action.PICKUP)
    if checkout:
        b.turn_to(_face_towards(b.cell, b.facing, {basket.checkout}))
        b.act(Action.PICKUP)
    return Trajectory(np.array(b.states, dtype=np.int16).reshape(-1, 3), np.array(b.actions, dtype=np.int8), basket, tuple(recorded), (), method)


# -- line-delimited I/O ---------------------------------------------------------


def trajectory_to_record(traj: Trajectory, ident: str | int | None = None) -> dict:
    rec = {
        "id": ident,
        "method": traj.method,
        "conditions": traj.conditions.to_dict(),
        "steps": [
            [int(x), int(y), Orientation(int(f)).name, ACTION_LABELS[Action(int(a))]]
            for (x, y, f), a in zip(traj.states, traj.actions)
        ],
        "pickups": [[i, c] for i, c in traj.pickups],
    }
    if traj.flags:
        rec["flags"] = list(traj.flags)
    return rec


def trajectory_from_record(rec: dict) -> Trajectory:
    steps = rec["steps"]
    states = np.array([[s[0], s[1], Orientation[s[2]]] for s in steps], dtype=np.int16).reshape(-1, 3)
    actions = np.array([LABEL_TO_ACTION[s[3]] for s in steps], dtype=np.int8)
    return Trajectory(
        states,
        actions,
        Basket.from_dict(rec["conditions"]),
        tuple((int(i), str(c)) for i, c in rec.get("pickups", ())),
        tuple(rec.get("flags", ())),
        rec.get("method", ""),
    )


def write_trajectories(path: str | Path, trajs: Iterable[Trajectory]) -> int:
    n = 0
    with open(path, "w") as fh:
        for i, t in enumerate(trajs):
            fh.write(json.dumps(trajectory_to_record(t, i), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_trajectories(path: str | Path) -> Iterator[Trajectory]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield trajectory_from_record(json.loads(line))


def read_trajectories(path: str | Path) -> list[Trajectory]:
    return list(iter_trajectories(path))
