import math
import warnings
from collections import Counter

import numpy as np
import pytest

from shopsim.config import get_cluster
from shopsim.generators import gen_tsp
from shopsim.layout import Basket, load_layout
from shopsim.maxent import (
    RetentionWarning,
    RewardSpec,
    cache_key,
    load_policy,
    outcome_distribution,
    rollout,
    sample_retained,
    save_policy,
    simulate,
    soft_value_iteration,
    solve_cached,
    terminal_reward,
)
from shopsim.parallel import stream
from shopsim.trajectory import EpisodeSummary, check_trajectory, summarize

from test_acceptance import OPEN_ROOM


def _log_prob(policy, actions):
    """Log-probability of an action sequence under the policy, walking the MDP tables."""
    nxt, _, terminal, _, _ = policy.mdp.tables
    s = policy.mdp.start_state
    lp = 0.0
    for t, a in enumerate(actions):
        lp += math.log(policy.action_probs(t, np.array([s]))[0, a])
        if terminal[s] and a == 3:
            break
        s = nxt[s, a]
    return lp


def _return(layout, traj, spec):
    return terminal_reward(summarize(traj, layout), spec, traj.conditions)


def test_terminal_reward_examples():
    spec = RewardSpec()
    b2 = Basket(["x", "y"], (0, 0))
    assert terminal_reward(EpisodeSummary({"x", "y"}, 0, (0, 0), 10), spec, Basket(["x", "y"], (0, 0), budget=10)) == 2.0
    assert terminal_reward(EpisodeSummary(set(), 0, (0, 0), 3), spec, Basket([], (0, 0))) == 1.5
    assert terminal_reward(EpisodeSummary({"x"}, 1, (1, 1), 9), spec, b2) == pytest.approx(0.25)
    assert terminal_reward(EpisodeSummary({"x", "y"}, 0, None, 9), spec, b2) == 1.0
    with pytest.raises(ValueError):
        RewardSpec(w_items=-1)
    with pytest.raises(ValueError):
        RewardSpec(gamma=0.9)


def test_bellman_residual_and_normalisation(small):
    pol = soft_value_iteration(small, Basket(["a", "b"], (7, 6)), RewardSpec(), 0.5)
    assert pol.bellman_residual() <= 1e-9
    rng = np.random.default_rng(0)
    for t in rng.integers(0, pol.horizon, size=10):
        p = pol.action_probs(int(t), np.arange(pol.mdp.n_states))
        assert np.allclose(p.sum(axis=1), 1, atol=1e-9)


def test_constant_rewards_give_uniform_last_step(small):
    spec = RewardSpec(w_items=0, w_checkout=0, w_budget=0, w_wrong=0, horizon=12)
    pol = soft_value_iteration(small, Basket(["a"], (7, 6)), spec, 0.7)
    p = pol.action_probs(pol.horizon - 1, np.arange(pol.mdp.n_states))
    assert np.allclose(p, 0.25)


def test_sequence_probability_is_boltzmann(small):
    """log pi(xi) == (R(xi) - V0) / tau for sampled sequences, with and without a budget."""
    for basket in (Basket(["a", "c"], (7, 6)), Basket(["a", "c"], (7, 6), budget=40)):
        spec = RewardSpec(horizon=60)
        tau = 0.5
        pol = soft_value_iteration(small, basket, spec, tau)
        v0 = pol.values[0][pol.mdp.start_state]
        trajs, ret, _ = simulate(pol, stream(1, 0).random((200, pol.horizon)), min_reward=-math.inf)
        for t, r in zip(trajs, ret):
            assert r == pytest.approx(_return(small, t, spec) if t.actions[-1] == 3 and summarize(t, small).checkout else r)
            assert _log_prob(pol, t.actions) == pytest.approx((r - v0) / tau, abs=1e-9)


def test_idle_turn_pairs_change_weight_only_through_budget(small):
    spec = RewardSpec(horizon=60)
    tau = 0.5
    for budget in (None, 30):
        basket = Basket(["a"], (7, 6), budget=budget)
        pol = soft_value_iteration(small, basket, spec, tau)
        base = gen_tsp(small, Basket(["a"], (7, 6)))
        acts = list(base.actions)
        padded = acts[:1] + [1, 2] + acts[1:]
        diff = _log_prob(pol, padded) - _log_prob(pol, acts)
        if budget is None:
            assert diff == pytest.approx(0.0, abs=1e-9)
        else:
            L = len(acts)
            b = lambda n: spec.w_budget * max(0.0, 1 - abs(n - budget) / budget)
            assert diff == pytest.approx((b(L + 2) - b(L)) / tau, abs=1e-9)


def test_enumeration_oracle_exact_on_open_room():
    from test_acceptance import _enumerate_boltzmann

    lay = load_layout(OPEN_ROOM)
    spec = RewardSpec(horizon=6)
    pol = soft_value_iteration(lay, Basket([], (1, 2)), spec, 0.5)
    keys, p = _enumerate_boltzmann(lay.walkable, lay.entrance, 0, (1, 2), 6, 0.5, 1.0, 1.5)
    q = np.array([math.exp(_log_prob(pol, k)) for k in keys])
    assert q.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.max(np.abs(q - p)) < 1e-12
    # cell-path marginal: far fewer outcomes, so sampling noise drops below the 0.02 bar
    n = 200_000
    trajs, _, _ = simulate(pol, stream(0, 1).random((n, pol.horizon)), min_reward=-math.inf)

    def cells(seq):
        out, cell, f = [], lay.entrance, 0
        moves = [(0, -1), (1, 0), (0, 1), (-1, 0)]
        for a in seq:
            if a == 0:
                n2 = (cell[0] + moves[f][0], cell[1] + moves[f][1])
                if lay.is_walkable(n2):
                    cell = n2
            elif a in (1, 2):
                f = (f + (1 if a == 2 else -1)) % 4
            out.append(cell)
        return tuple(out)

    exact = Counter()
    for k, pk in zip(keys, p):
        exact[cells(k)] += pk
    emp = Counter(cells(tuple(int(a) for a in t.actions)) for t in trajs)
    tv = 0.5 * sum(abs(exact[k] - emp.get(k, 0) / n) for k in exact)
    assert tv < 0.02


def _trajectory_entropy(policy):
    """Entropy of the rollout distribution from every (t, s), by backward recursion."""
    nxt, _, terminal, _, _ = policy.mdp.tables
    states = np.arange(policy.mdp.n_states)
    h = np.zeros((policy.horizon + 1, len(states)))
    for t in range(policy.horizon - 1, -1, -1):
        p = policy.action_probs(t, states)
        cont = h[t + 1][nxt].copy()
        cont[terminal, 3] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            h[t] = np.sum(np.where(p > 0, p * (cont - np.log(p)), 0.0), axis=1)
    return h


def _entropy_sample(small):
    basket = Basket(["a", "b"], (7, 6))
    spec = RewardSpec(horizon=50)
    pols = [soft_value_iteration(small, basket, spec, tau) for tau in (0.1, 0.5, 1.0, 2.0)]
    rng = np.random.default_rng(8)
    states = rng.integers(0, pols[0].mdp.n_states, size=100)
    ts = rng.integers(0, spec.horizon, size=100)
    return pols, states, ts


def test_trajectory_entropy_non_decreasing_in_tau(small):
    pols, states, ts = _entropy_sample(small)
    hs = [_trajectory_entropy(p) for p in pols]
    for s, t in zip(states, ts):
        h = [x[t, s] for x in hs]
        assert all(b >= a - 1e-9 for a, b in zip(h, h[1:])), (s, t, h)


@pytest.mark.xfail(strict=True, reason="one-step action entropy is not monotone in tau: Q itself depends on tau")
def test_action_entropy_non_decreasing_in_tau(small):
    pols, states, ts = _entropy_sample(small)
    for s, t in zip(states, ts):
        h = [p.entropy(int(t), np.array([s]))[0] for p in pols]
        assert all(b >= a - 1e-12 for a, b in zip(h, h[1:])), (s, t, h)


def test_near_zero_temperature_reaches_optimal_reward(small):
    basket = Basket(["a", "b", "c"], (7, 6))
    spec = RewardSpec()
    pol = soft_value_iteration(small, basket, spec, 1e-3)
    tsp = gen_tsp(small, basket)
    best = _return(small, tsp, spec)
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = rollout(pol, rng)
        assert not hasattr(t, "reason")
        assert _return(small, t, spec) == pytest.approx(best)
    assert outcome_distribution(pol).retention > 0.999


def test_retained_trajectories_satisfy_conditioning(small):
    basket = Basket(["a", "b"], (7, 6))
    pol = soft_value_iteration(small, basket, RewardSpec(), 0.05)
    kept, attempts = sample_retained(pol, 300, 4)
    assert len(kept) == 300 and attempts >= 300
    for t in kept:
        assert check_trajectory(t, small) == []
        s = summarize(t, small)
        assert s.collected == {"a", "b"} and s.wrong_pickups == 0 and s.checkout == (7, 6)
        assert sorted(c for _, c in t.pickups) == ["a", "b"]


def test_sampling_is_batch_independent(small):
    pol = soft_value_iteration(small, Basket(["b"], (7, 6)), RewardSpec(), 0.05)
    a, na = sample_retained(pol, 40, 3, batch=7)
    b, nb = sample_retained(pol, 40, 3, batch=4096)
    assert a == b and na == nb


def test_exact_retention_matches_sampling(small):
    pol = soft_value_iteration(small, Basket(["a", "b"], (7, 6)), RewardSpec(), 0.3)
    exact = outcome_distribution(pol)
    _, _, keep = simulate(pol, stream(2, 0).random((20_000, pol.horizon)))
    se = math.sqrt(exact.retention * (1 - exact.retention) / 20_000)
    assert abs(keep.mean() - exact.retention) < 4 * se + 1e-9
    assert exact.retained_by_length.sum() + exact.rejected_by_length.sum() == pytest.approx(1.0)


def test_low_retention_warns(small):
    pol = soft_value_iteration(small, Basket(["a"], (7, 6)), RewardSpec(), 0.5)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        kept, attempts = sample_retained(pol, 5, 0, min_reward=99.0, max_attempts=500)
    assert kept == [] and attempts == 500
    assert any(issubclass(w.category, RetentionWarning) for w in caught)


def test_budget_shifts_mean_length(small):
    items = ["a", "b"]
    L = len(gen_tsp(small, Basket(items, (7, 6))))
    means = []
    for budget in (L, L + 10, L + 20):
        pol = soft_value_iteration(small, Basket(items, (7, 6), budget=budget), RewardSpec(), 0.5)
        assert pol.horizon == 2 * budget
        means.append(outcome_distribution(pol).mean_retained_length)
    assert means[0] < means[1] < means[2]


def test_invalid_requests(small):
    with pytest.raises(ValueError):
        soft_value_iteration(small, Basket(["a"], (7, 6)), tau=0.0)
    with pytest.raises(ValueError):
        soft_value_iteration(small, Basket(["zz"], (7, 6)))
    with pytest.raises(ValueError):
        soft_value_iteration(small, Basket(["a"], (1, 6)))
    with pytest.raises(ValueError, match="budget"):
        soft_value_iteration(small, Basket(["a", "b", "c"], (7, 6), budget=3))


def test_policy_cache_round_trip(small, tmp_path):
    basket = Basket(["a"], (7, 6))
    spec = RewardSpec(horizon=30)
    pol = solve_cached(small, basket, spec, 0.5, tmp_path)
    files = list(tmp_path.iterdir())
    assert len(files) == 1
    again = solve_cached(small, basket, spec, 0.5, tmp_path)
    assert np.array_equal(again.values, pol.values)
    path = tmp_path / "copy.bin"
    save_policy(pol, path)
    assert np.array_equal(load_policy(path, small, basket, spec, 0.5).values, pol.values)
    with pytest.raises(ValueError):
        load_policy(path, small, basket, spec, 0.6)
    assert cache_key(small, basket, spec, 0.5) != cache_key(small, basket, spec, 0.6)


def test_soft_drinks_mode_reached(store, experiment):
    cluster = get_cluster(experiment.clusters, 2)
    essentials = sorted(cluster.essential_products)
    basket = Basket(essentials, (9, 5))
    m = experiment.maxent
    pol = soft_value_iteration(store, basket, m.reward_spec(), m.tau)
    kept, _ = sample_retained(pol, 10_000, 0)
    shelves = store.category_shelves("soft_drinks")
    near = set(store.approach_cells(shelves))
    hits = sum(any((int(x), int(y)) in near for x, y in t.cells) for t in kept)
    tsp = gen_tsp(store, basket)
    assert hits >= 1
    assert not any((int(x), int(y)) in near for x, y in tsp.cells)
