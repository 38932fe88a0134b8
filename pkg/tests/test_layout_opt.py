import math
from dataclasses import replace

import numpy as np
import pytest

from shopsim.analytics import ClusterProfile, ShelfTraffic
from shopsim.config import get_cluster
from shopsim.layout import Basket, ProductProfile, layout_from_dict, layout_to_dict, reposition
from shopsim.layout_opt import (
    NotComputable,
    UseCaseConfig,
    evaluate_layout,
    impulse_profit,
    objective,
    rank_unoccupied_shelves,
    run_usecase3,
    select_product,
)
from shopsim.generators import gen_pnn


def _traffic(layout, values=None):
    shelves = layout.shelf_cells
    th = np.zeros(len(shelves)) if values is None else np.array([values.get(c, 0.0) for c in shelves])
    return ShelfTraffic(shelves, th)


def _with_empty_shelves(small):
    """SMALL with c reduced to one shelf, leaving (7, 1) empty."""
    doc = layout_to_dict(small)
    doc["placements"]["c"] = [[6, 5]]
    return layout_from_dict(doc)


def _scaled_margins(layout, factor):
    doc = layout_to_dict(layout)
    for c in doc["categories"]:
        c["margin"] = c["margin"] * factor
    return layout_from_dict(doc)


def test_impulse_profit_examples():
    assert impulse_profit(ProductProfile("soft", 3.59, 0.05, 7.20)) == pytest.approx(1.29, abs=0.005)
    assert impulse_profit(ProductProfile("soft", 3.59, 0.05, 3.20)) == pytest.approx(0.574, abs=0.0005)
    assert impulse_profit(ProductProfile("soft", 3.59, 0.05, 0.0)) == 0.0
    with pytest.raises(NotComputable):
        impulse_profit(ProductProfile("soft", 3.59, 0.05, math.inf))


def test_objective_examples(small):
    prof = {"a": ProductProfile("a", 3.59, 0.05, 3.20)}
    assert objective(small, prof, _traffic(small)) == 0.0
    assert objective({(1, 1): "a"}, prof, _traffic(small, {(1, 1): 0.5})) == pytest.approx(0.2872, abs=1e-4)
    theta = _traffic(small, {(1, 1): 0.2, (7, 1): 0.6})
    assert objective({(7, 1): "a"}, prof, theta) > objective({(1, 1): "a"}, prof, theta)
    with pytest.raises(NotComputable):
        objective({(1, 1): "a"}, {"a": ProductProfile("a", 1, 0.05, math.inf)}, theta)


def test_rank_unoccupied_shelves(store, small):
    theta = _traffic(store, {c: 0.3 for c in store.shelf_cells})
    empty = store.unoccupied_shelves()
    assert rank_unoccupied_shelves(store, theta, 0) == []
    assert rank_unoccupied_shelves(store, theta, 3) == sorted(empty, key=lambda c: (c[1], c[0]))[:3]
    busy = _traffic(store, {empty[-1]: 0.9, empty[0]: 0.1})
    assert rank_unoccupied_shelves(store, busy, 1) == [empty[-1]]
    with pytest.raises(ValueError):
        rank_unoccupied_shelves(small, _traffic(small), 1)


def test_profit_ranking_selects_soft_drinks(store, experiment):
    cluster = get_cluster(experiment.clusters, 2)
    rates = {"fruits_yogurt": 0.115, "soft_drinks": 3.20}
    product, scores, fell_back = select_product(cluster, store, rates)
    assert product == "soft_drinks" and not fell_back
    assert scores["soft_drinks"] == pytest.approx(3.20 * 3.59 * 0.05)
    # an undefined rate switches every product to purchase-probability scoring
    product, scores, fell_back = select_product(cluster, store, {"fruits_yogurt": math.inf, "soft_drinks": math.inf})
    assert fell_back and product == "fruits_yogurt"
    assert scores["soft_drinks"] == pytest.approx(0.013 * 3.59 * 0.05)


def test_margin_scaling_keeps_choices(small):
    lay = _with_empty_shelves(small)
    cluster = ClusterProfile(1, {"b": 0.9, "a": 0.1, "c": 0.15})
    rng = np.random.default_rng(0)
    for _ in range(20):
        rates = dict(zip(["a", "c"], rng.uniform(0, 5, 2)))
        base = select_product(cluster, lay, rates)[0]
        for f in (0.2, 3.0, 9.0):
            assert select_product(cluster, _scaled_margins(lay, f), rates)[0] == base


def _trips(small, n, seed=0):
    rng = np.random.default_rng(seed)
    kinds = [["b"], ["c"], ["a", "c"]]
    return [gen_pnn(small, Basket(kinds[i % 3], (7, 6)), rng) for i in range(n)]


def test_evaluate_layout(small):
    lay = _with_empty_shelves(small)
    moved = reposition(lay, "a", [(7, 1)])
    trips = _trips(small, 60)
    zero = evaluate_layout(moved, trips, {"a": 0.0, "c": 0.0})
    assert zero.mc_profit == 0.0 and zero.expected_profit == 0.0
    many = [trips[i % len(trips)] for i in range(10_000)]
    ev = evaluate_layout(moved, many, {"a": 0.4, "c": 0.7}, rng=np.random.default_rng(1))
    assert 0 < ev.visit_frac["a"] < 1 and ev.expected_profit > 0
    assert abs(ev.mc_profit - ev.expected_profit) <= 3 * ev.std_error
    # rates above 1 are clamped only when sampling
    big = evaluate_layout(moved, trips, {"a": 0.4, "c": 2.5})
    want = big.visit_frac["a"] * 0.4 * 0.2 + big.visit_frac["c"] * 1.0 * 0.4
    assert big.expected_profit == pytest.approx(want)
    # closed form ignores order and upsampling
    shuffled = evaluate_layout(moved, trips[::-1] * 3, {"a": 0.4, "c": 2.5})
    assert shuffled.expected_profit == pytest.approx(evaluate_layout(moved, trips, {"a": 0.4, "c": 2.5}).expected_profit, abs=1e-9)
    with pytest.raises(ValueError):
        evaluate_layout(moved, trips, ClusterProfile(1, {"a": 0.1}, impulse_rates={}))
    with pytest.raises(NotComputable):
        evaluate_layout(moved, trips, {"a": math.inf})


@pytest.fixture(scope="module")
def usecase(store, experiment):
    cluster = get_cluster(experiment.clusters, 2)
    cfg = UseCaseConfig(tuple(experiment.baskets.checkouts), n_train=600, n_eval=200, seed=3)
    return cluster, cfg


def test_usecase_report_shape(store, usecase):
    cluster, cfg = usecase
    report, est = run_usecase3(cluster, ["tsp", "pnn"], store, cfg)
    assert list(report.outcomes) == ["noisy_human", "tsp", "pnn"]
    empty = set(store.unoccupied_shelves())
    truth = report.outcomes["noisy_human"]
    # the reference row replays its own trips
    assert truth.original_own >= 0 and truth.suggested_truth >= 0
    for m, o in report.outcomes.items():
        assert set(o.shelves) <= empty and len(o.shelves) == 2
        assert min(o.original_own, o.suggested_own, o.suggested_truth) >= 0
    # shortest-route trips never pass the impulse shelves, so their rates are undefined
    for m in ("tsp", "pnn"):
        assert report.outcomes[m].fell_back
        assert any(math.isinf(r) for r in report.outcomes[m].rates.values())
    assert "suggested (noisy_human trajectories)" in report.table()


def test_usecase_is_deterministic(store, usecase):
    cluster, cfg = usecase
    a, _ = run_usecase3(cluster, ["tsp"], store, cfg)
    b, _ = run_usecase3(cluster, ["tsp"], store, replace(cfg, workers=2))
    assert a.to_dict() == b.to_dict()
    with pytest.raises(ValueError):
        run_usecase3(ClusterProfile(9, {"bakery": 1.0}), ["tsp"], store, cfg)
