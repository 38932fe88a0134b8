import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shopsim.generators import gen_pnn, gen_tsp
from shopsim.ingest import schema
from shopsim.layout import Basket
from shopsim.trajectory import (
    Action,
    Trajectory,
    advance,
    check_trajectory,
    read_trajectories,
    summarize,
    trajectory_from_record,
    trajectory_from_route,
    trajectory_to_record,
    write_trajectories,
)


def test_advance_dynamics(small):
    assert advance(small, (1, 5), 0, Action.FORWARD) == ((1, 4), 0)
    assert advance(small, (1, 5), 3, Action.FORWARD) == ((1, 5), 3)  # wall
    assert advance(small, (1, 5), 0, Action.LEFT) == ((1, 5), 3)
    assert advance(small, (1, 5), 3, Action.RIGHT) == ((1, 5), 0)
    assert advance(small, (1, 5), 0, Action.PICKUP) == ((1, 5), 0)
    # checkout cells cannot be entered
    assert advance(small, (7, 5), 2, Action.FORWARD) == ((7, 5), 2)


def test_route_conversion_is_minimal(small):
    route = [(1, 6), (1, 5), (2, 5), (3, 5), (4, 5), (5, 5), (5, 4), (6, 4), (7, 4), (7, 5)]
    t = trajectory_from_route(small, route, [], Basket([], (7, 6)))
    assert check_trajectory(t, small) == []
    assert t.route() == route
    assert t.route_length == len(route) - 1
    turns = int(np.sum((t.actions == Action.LEFT) | (t.actions == Action.RIGHT)))
    forwards = int(np.sum(t.actions == Action.FORWARD))
    assert forwards == len(route) - 1
    assert turns == 4  # E, N, E, S; already facing the checkout at the end
    assert t.actions[-1] == Action.PICKUP


def test_pickups_face_the_shelf(small):
    basket = Basket(["b"], (7, 6))
    t = gen_tsp(small, basket)
    s = summarize(t, small)
    assert s.collected == {"b"} and s.wrong_pickups == 0 and s.checkout == (7, 6)
    assert [c for _, c in t.pickups] == ["b"]
    idx = t.pickups[0][0]
    assert t.actions[idx] == Action.PICKUP


def test_check_trajectory_reports_problems(small):
    good = gen_tsp(small, Basket(["a"], (7, 6)))
    states = good.states.copy()
    states[3] = [4, 4, 0]
    bad = Trajectory(states, good.actions, good.conditions)
    assert any("inconsistent" in p for p in check_trajectory(bad, small))
    cut = Trajectory(good.states[:4], good.actions[:4], good.conditions)
    assert any("does not end" in p for p in check_trajectory(cut, small))
    assert check_trajectory(cut, small, step_limit=4) == []
    assert check_trajectory(Trajectory(np.empty((0, 3)), np.empty(0), good.conditions), small) == ["empty trajectory"]


def test_records_round_trip_and_match_schema(small, tmp_path):
    rng = np.random.default_rng(0)
    trajs = [gen_pnn(small, Basket(["a", "b", "c"], (7, 6)), rng) for _ in range(5)]
    trajs.append(trajs[0].with_pickups(trajs[0].pickups, ["note"]))
    path = tmp_path / "t.jsonl"
    assert write_trajectories(path, trajs) == 6
    back = read_trajectories(path)
    assert back == trajs
    validator = jsonschema.Draft202012Validator(schema("trajectory"))
    for line in path.read_text().splitlines():
        validator.validate(json.loads(line))
    rec = trajectory_to_record(trajs[0])
    assert trajectory_from_record(rec) == trajs[0]
    assert rec["steps"][-1][3] == "pickup_or_checkout"


def test_states_are_immutable(small):
    t = gen_tsp(small, Basket([], (7, 6)))
    with pytest.raises(ValueError):
        t.states[0, 0] = 5
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 3)), np.zeros(3), t.conditions)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c"]), unique=True), st.integers(0, 2**31))
def test_generated_trajectories_are_valid(items, seed):
    from conftest import SMALL
    from shopsim.layout import load_layout

    lay = load_layout(SMALL)
    b = Basket(items, (7, 6))
    for t in (gen_tsp(lay, b), gen_pnn(lay, b, np.random.default_rng(seed))):
        assert check_trajectory(t, lay) == []
        s = summarize(t, lay)
        assert s.collected == set(items) and s.wrong_pickups == 0 and s.checkout == (7, 6)
