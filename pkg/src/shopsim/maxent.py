"""Exact maximum-entropy customer model.

The store becomes a finite-horizon MDP over augmented states
``(cell, orientation, remaining-items mask)``; time is carried by the
time-indexed value function.  Soft value iteration computes

    V_H(s) = R_timeout(s)
    V_t(s) = tau * log sum_a exp((r(s, a) + V_{t+1}(s')) / tau)

with the checkout action terminating the episode.  The induced policy samples
trajectories with probability proportional to ``exp(R(trajectory) / tau)``.
Rewards are terminal except the wrong-pickup penalty, which is paid when it
happens (equivalent for an undiscounted return).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .generators import gen_tsp
from .layout import Basket, CellKind, Layout, step
from .parallel import stream
from .trajectory import Action, EpisodeSummary, Trajectory

log = logging.getLogger(__name__)

N_ACTIONS = 4
CACHE_MAGIC = b"SHOPSVI\x00"
CACHE_VERSION = 1


class RetentionWarning(UserWarning):
    pass


class SolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    w_items: float = 1.0
    w_checkout: float = 0.5
    w_budget: float = 0.5
    w_wrong: float = 0.25
    horizon: int | None = None
    horizon_factor: float = 4.0  # horizon = factor x TSP step count when ``horizon`` is unset
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("w_items", "w_checkout", "w_budget", "w_wrong"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.gamma != 1.0:
            raise ValueError("gamma is fixed at 1.0")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def full_reward(self) -> float:
        """Reward of a complete basket at the right checkout (the default retention bar)."""
        return self.w_items + self.w_checkout


def budget_term(spec: RewardSpec, steps, budget: int | None):
    if budget is None:
        return 0.0 * np.asarray(steps, dtype=float)
    return spec.w_budget * np.maximum(0.0, 1.0 - np.abs(np.asarray(steps, dtype=float) - budget) / budget)


def terminal_reward(summary: EpisodeSummary, spec: RewardSpec, basket: Basket) -> float:
    """Episode return: item accuracy, wrong pickups, checkout and budget adherence.

    An empty basket counts as fully collected.
    """
    if basket.items:
        frac = len(summary.collected & basket.items) / len(basket.items)
    else:
        frac = 1.0
    r = spec.w_items * frac - spec.w_wrong * summary.wrong_pickups
    if summary.checkout is not None and summary.checkout == basket.checkout:
        r += spec.w_checkout
    if basket.budget is not None:
        r += float(budget_term(spec, summary.steps, basket.budget))
    return float(r)


# -- tabular MDP ---------------------------------------------------------------


@dataclass(eq=False)
class StoreMDP:
    """Transition and reward tables for one (layout, basket, spec)."""

    layout: Layout
    basket: Basket
    spec: RewardSpec

    @cached_property
    def items(self) -> tuple[str, ...]:
        return self.basket.ordered_items

    @property
    def n_masks(self) -> int:
        return 1 << len(self.items)

    @property
    def n_cells(self) -> int:
        return len(self.layout.walkable_cells)

    @property
    def n_states(self) -> int:
        return self.n_cells * 4 * self.n_masks

    def state_index(self, cell, facing: int, mask: int) -> int:
        return (self.layout.walkable_index[tuple(cell)] * 4 + int(facing)) * self.n_masks + int(mask)

    def decode(self, s: np.ndarray):
        s = np.asarray(s)
        mask = s % self.n_masks
        co = s // self.n_masks
        return co // 4, co % 4, mask

    @property
    def start_state(self) -> int:
        return self.state_index(self.layout.entrance, self.layout.entrance_facing, self.n_masks - 1)

    @cached_property
    def tables(self):
        """``next`` (S, 4), immediate ``reward`` (S, 4), ``terminal`` (S,) and ``terminal_base`` (S,)."""
        lay, M = self.layout, self.n_masks
        cells = lay.walkable_cells
        widx = lay.walkable_index
        bit = {item: 1 << i for i, item in enumerate(self.items)}
        k = len(self.items)
        masks = np.arange(M)
        popcount = np.array([bin(m).count("1") for m in masks])
        frac = (k - popcount) / k if k else np.ones(M)

        S = self.n_states
        nxt = np.empty((S, N_ACTIONS), dtype=np.int64)
        rew = np.zeros((S, N_ACTIONS))
        terminal = np.zeros(S, dtype=bool)
        term_base = np.zeros(S)
        for ci, cell in enumerate(cells):
            for o in range(4):
                base = (ci * 4 + o) * M
                sl = slice(base, base + M)
                front = step(cell, o)
                fi = widx.get(front)
                nxt[sl, Action.FORWARD] = ((fi if fi is not None else ci) * 4 + o) * M + masks
                nxt[sl, Action.LEFT] = (ci * 4 + (o - 1) % 4) * M + masks
                nxt[sl, Action.RIGHT] = (ci * 4 + (o + 1) % 4) * M + masks
                nxt[sl, Action.PICKUP] = base + masks
                if not lay.in_bounds(front):
                    continue
                kind = lay.kind(front)
                if kind == CellKind.CHECKOUT:
                    terminal[sl] = True
                    correct = front == self.basket.checkout
                    term_base[sl] = self.spec.w_items * frac + (self.spec.w_checkout if correct else 0.0)
                elif kind == CellKind.SHELF and front in lay.placements:
                    cat = lay.placements[front]
                    if cat in bit:
                        nxt[sl, Action.PICKUP] = base + (masks & ~bit[cat])
                    else:
                        rew[sl, Action.PICKUP] = -self.spec.w_wrong
        timeout = np.tile(self.spec.w_items * frac, self.n_cells * 4)
        return nxt, rew, terminal, term_base, timeout

    def checkout_correct(self, s: np.ndarray) -> np.ndarray:
        lay = self.layout
        cells = lay.walkable_cells
        ci, o, _ = self.decode(s)
        out = np.zeros(len(np.atleast_1d(s)), dtype=bool)
        for i, (c, f) in enumerate(zip(np.atleast_1d(ci), np.atleast_1d(o))):
            out[i] = step(cells[int(c)], int(f)) == self.basket.checkout
        return out


# -- solving ---------------------------------------------------------------------


@dataclass(eq=False)
class PolicyTable:
    """Soft values ``V[t, s]`` for ``t = 0..H``; the policy is derived on demand."""

    mdp: StoreMDP
    tau: float
    horizon: int
    values: np.ndarray
    solve_seconds: float = 0.0

    @property
    def layout(self) -> Layout:
        return self.mdp.layout

    @property
    def basket(self) -> Basket:
        return self.mdp.basket

    @property
    def spec(self) -> RewardSpec:
        return self.mdp.spec

    def q_values(self, t: int, states) -> np.ndarray:
        nxt, rew, terminal, term_base, _ = self.mdp.tables
        states = np.asarray(states)
        q = rew[states] + self.values[t + 1][nxt[states]]
        term = terminal[states]
        if term.any():
            q[term, Action.PICKUP] = term_base[states[term]] + budget_term(self.spec, t + 1, self.basket.budget)
        return q

    def action_probs(self, t: int, states) -> np.ndarray:
        """Soft-optimal action distribution ``pi_t(a | s)`` for each state."""
        q = self.q_values(t, states) / self.tau
        q -= q.max(axis=1, keepdims=True)
        p = np.exp(q)
        return p / p.sum(axis=1, keepdims=True)

    def bellman_residual(self) -> float:
        worst = 0.0
        states = np.arange(self.mdp.n_states)
        for t in range(self.horizon):
            v = self.tau * logsumexp(self.q_values(t, states) / self.tau, axis=1)
            worst = max(worst, float(np.max(np.abs(v - self.values[t]))))
        return worst

    def entropy(self, t: int, states) -> np.ndarray:
        p = self.action_probs(t, states)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)


def resolve_horizon(layout: Layout, basket: Basket, spec: RewardSpec) -> int:
    if spec.horizon is not None:
        return spec.horizon
    if basket.budget is not None:
        # the adherence term vanishes beyond twice the budget
        return 2 * basket.budget
    shortest = len(gen_tsp(layout, Basket(basket.items, basket.checkout)))
    return max(1, int(math.ceil(spec.horizon_factor * shortest)))


def soft_value_iteration(layout: Layout, basket: Basket, spec: RewardSpec | None = None, tau: float = 0.5) -> PolicyTable:
    """Backward induction of the soft Bellman recursion for one basket."""
    spec = spec or RewardSpec()
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if basket.checkout not in layout.checkout_ids:
        raise ValueError(f"{basket.checkout} is not a checkout")
    unknown = basket.items - set(layout.category_ids)
    if unknown:
        raise ValueError(f"unknown basket items {sorted(unknown)}")
    if basket.budget is not None:
        shortest = len(gen_tsp(layout, Basket(basket.items, basket.checkout)))
        if basket.budget < shortest:
            raise ValueError(f"budget {basket.budget} below the shortest feasible trip of {shortest} steps")
    horizon = resolve_horizon(layout, basket, spec)
    t0 = time.perf_counter()
    mdp = StoreMDP(layout, basket, spec)
    nxt, rew, terminal, term_base, timeout = mdp.tables
    V = np.empty((horizon + 1, mdp.n_states))
    V[horizon] = timeout + budget_term(spec, horizon, basket.budget)
    term_idx = np.flatnonzero(terminal)
    for t in range(horizon - 1, -1, -1):
        q = rew + V[t + 1][nxt]
        q[term_idx, Action.PICKUP] = term_base[term_idx] + budget_term(spec, t + 1, basket.budget)
        V[t] = tau * logsumexp(q / tau, axis=1)
        bad = ~np.isfinite(V[t])
        if bad.any():
            s = int(np.flatnonzero(bad)[0])
            ci, o, m = mdp.decode(s)
            raise SolveError(f"non-finite soft value at t={t}, cell={layout.walkable_cells[int(ci)]}, facing={int(o)}, mask={int(m)}")
    table = PolicyTable(mdp, tau, horizon, V, time.perf_counter() - t0)
    log.debug("solved %d states x %d steps in %.2fs", mdp.n_states, horizon, table.solve_seconds)
    return table


# -- sampling ------------------------------------------------------------------------


@dataclass
class Rollouts:
    trajectories: list[Trajectory]
    rewards: np.ndarray
    retained: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True)
class Rejection:
    reason: str
    reward: float
    trajectory: Trajectory


def _uniforms(seed: int, indices: np.ndarray, horizon: int) -> np.ndarray:
    return np.stack([stream(seed, int(i)).random(horizon) for i in indices]) if len(indices) else np.empty((0, horizon))


def simulate(policy: PolicyTable, uniforms: np.ndarray, min_reward: float | None = None) -> tuple[list[Trajectory], np.ndarray, np.ndarray]:
    """Roll out one episode per row of ``uniforms`` (one uniform draw per step)."""
    mdp = policy.mdp
    lay = mdp.layout
    nxt, rew, terminal, term_base, timeout = mdp.tables
    n, H = uniforms.shape[0], policy.horizon
    min_reward = policy.spec.full_reward if min_reward is None else min_reward
    s = np.full(n, mdp.start_state, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    hist_s = np.zeros((H, n), dtype=np.int64)
    hist_a = np.zeros((H, n), dtype=np.int8)
    length = np.full(n, H)
    ret = np.zeros(n)
    for t in range(H):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        st = s[idx]
        p = policy.action_probs(t, st)
        a = (uniforms[idx, t][:, None] > np.cumsum(p, axis=1)[:, :-1]).sum(axis=1)
        hist_s[t, idx] = st
        hist_a[t, idx] = a
        ret[idx] += rew[st, a]
        ends = terminal[st] & (a == Action.PICKUP)
        if ends.any():
            e = idx[ends]
            ret[e] += term_base[st[ends]] + budget_term(policy.spec, t + 1, mdp.basket.budget)
            length[e] = t + 1
            alive[e] = False
        s[idx[~ends]] = nxt[st[~ends], a[~ends]]
    if alive.any():
        ret[alive] += timeout[s[alive]] + budget_term(policy.spec, H, mdp.basket.budget)

    cells = np.array(lay.walkable_cells, dtype=np.int16)
    items = mdp.items
    trajs = []
    for i in range(n):
        L = int(length[i])
        ss = hist_s[:L, i]
        ci, o, m = mdp.decode(ss)
        states = np.column_stack([cells[ci], o]).astype(np.int16)
        m = np.append(m, s[i] % mdp.n_masks)
        pickups = []
        for j in np.flatnonzero(m[1:] != m[:-1]):
            cleared = int(m[j] & ~m[j + 1])
            pickups.append((int(j), items[cleared.bit_length() - 1]))
        trajs.append(Trajectory(states, hist_a[:L, i].copy(), mdp.basket, tuple(pickups), (), "maxent"))
    return trajs, ret, ret >= min_reward - 1e-9


def rollout(policy: PolicyTable, rng: np.random.Generator, min_reward: float | None = None) -> Trajectory | Rejection:
    trajs, ret, keep = simulate(policy, rng.random((1, policy.horizon)), min_reward)
    if keep[0]:
        return trajs[0]
    return Rejection("below-reward-threshold", float(ret[0]), trajs[0])


def sample_retained(
    policy: PolicyTable,
    count: int,
    seed: int,
    min_reward: float | None = None,
    batch: int = 4096,
    max_attempts: int | None = None,
    warn_below: float = 0.01,
) -> tuple[list[Trajectory], int]:
    """Draw episodes ``0, 1, 2, ...`` and keep the first ``count`` that pass the reward bar.

    Episode ``i`` always uses stream ``(seed, i)``, so the retained set does not
    depend on ``batch``.  Returns the trajectories and the number of attempts.
    """
    max_attempts = max_attempts if max_attempts is not None else max(100 * count, 10_000)
    kept: list[Trajectory] = []
    attempts = 0
    warned = False
    while len(kept) < count and attempts < max_attempts:
        n = min(batch, max_attempts - attempts)
        idx = np.arange(attempts, attempts + n)
        trajs, _, keep = simulate(policy, _uniforms(seed, idx, policy.horizon), min_reward)
        used = n
        for j, (t, k) in enumerate(zip(trajs, keep)):
            if k:
                kept.append(t)
                if len(kept) == count:
                    used = j + 1
                    break
        attempts += used
        rate = len(kept) / attempts
        if not warned and rate < warn_below:
            warnings.warn(f"retention rate {rate:.4%} after {attempts} rollouts is below {warn_below:.0%}", RetentionWarning, stacklevel=2)
            warned = True
    if len(kept) < count:
        warnings.warn(f"only {len(kept)} of {count} trajectories retained after {attempts} rollouts", RetentionWarning, stacklevel=2)
    return kept, attempts


# -- exact outcome distribution ----------------------------------------------------


@dataclass
class OutcomeDistribution:
    """Exact probabilities of episode outcomes under a policy."""

    retained_by_length: np.ndarray  # index = number of steps
    rejected_by_length: np.ndarray

    @property
    def retention(self) -> float:
        return float(self.retained_by_length.sum())

    @property
    def mean_retained_length(self) -> float:
        p = self.retained_by_length
        return float(np.arange(len(p)) @ p / p.sum())


def outcome_distribution(policy: PolicyTable, min_reward: float | None = None) -> OutcomeDistribution:
    """Propagate the state distribution forward, tracking wrong pickups exactly."""
    mdp, spec, H = policy.mdp, policy.spec, policy.horizon
    min_reward = spec.full_reward if min_reward is None else min_reward
    nxt, rew, terminal, term_base, timeout = mdp.tables
    best_bonus = spec.w_items + spec.w_checkout + (spec.w_budget if mdp.basket.budget is not None else 0.0)
    cap = 0 if spec.w_wrong == 0 else int(math.floor(max(0.0, best_bonus - min_reward) / spec.w_wrong)) + 1
    S = mdp.n_states
    dist = np.zeros((cap + 1, S))
    dist[0, mdp.start_state] = 1.0
    keep = np.zeros(H + 1)
    drop = np.zeros(H + 1)
    wrong_move = rew < 0
    for t in range(H):
        p = policy.action_probs(t, np.arange(S))
        b = budget_term(spec, t + 1, mdp.basket.budget)
        new = np.zeros_like(dist)
        for w in range(cap + 1):
            mass = dist[w][:, None] * p
            if not mass.any():
                continue
            tmask = terminal
            end_mass = mass[tmask, Action.PICKUP]
            R = term_base[tmask] - spec.w_wrong * w + b
            ok = R >= min_reward - 1e-9
            keep[t + 1] += end_mass[ok].sum()
            drop[t + 1] += end_mass[~ok].sum()
            mass[tmask, Action.PICKUP] = 0.0
            for a in range(N_ACTIONS):
                w_to = np.where(wrong_move[:, a], min(w + 1, cap), w)
                for wt in np.unique(w_to):
                    sel = w_to == wt
                    np.add.at(new[wt], nxt[sel, a], mass[sel, a])
        dist = new
    Rt = timeout + budget_term(spec, H, mdp.basket.budget)
    for w in range(cap + 1):
        ok = Rt - spec.w_wrong * w >= min_reward - 1e-9
        keep[H] += dist[w][ok].sum()
        drop[H] += dist[w][~ok].sum()
    return OutcomeDistribution(keep, drop)


# -- policy cache ------------------------------------------------------------------------


def cache_key(layout: Layout, basket: Basket, spec: RewardSpec, tau: float) -> str:
    blob = json.dumps(
        {"layout": layout.content_hash, "basket": basket.to_dict(), "spec": asdict(spec), "tau": tau},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def save_policy(policy: PolicyTable, path: str | Path) -> None:
    """Binary layout: 8-byte magic, u16 version, u32 header length, JSON header, float64 values."""
    header = json.dumps({
        "key": cache_key(policy.layout, policy.basket, policy.spec, policy.tau),
        "horizon": policy.horizon,
        "n_states": policy.mdp.n_states,
        "tau": policy.tau,
        "basket": policy.basket.to_dict(),
        "spec": asdict(policy.spec),
        "layout_hash": policy.layout.content_hash,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HI", CACHE_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(policy.values, dtype="<f8").tobytes())


def load_policy(path: str | Path, layout: Layout, basket: Basket, spec: RewardSpec, tau: float) -> PolicyTable:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path} is not a policy cache file")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported policy cache version {version}")
        header = json.loads(fh.read(hlen))
        if header["key"] != cache_key(layout, basket, spec, tau):
            raise ValueError("policy cache key mismatch")
        values = np.frombuffer(fh.read(), dtype="<f8").reshape(header["horizon"] + 1, header["n_states"]).copy()
    return PolicyTable(StoreMDP(layout, basket, spec), tau, header["horizon"], values)


def solve_cached(layout: Layout, basket: Basket, spec: RewardSpec, tau: float, cache_dir: str | Path | None = None) -> PolicyTable:
    if cache_dir is None:
        return soft_value_iteration(layout, basket, spec, tau)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{cache_key(layout, basket, spec, tau)[:24]}.svi"
    if path.exists():
        try:
            return load_policy(path, layout, basket, spec, tau)
        except ValueError:
            log.warning("ignoring stale policy cache %s", path)
    policy = soft_value_iteration(layout, basket, spec, tau)
    save_policy(policy, path)
    return policy
