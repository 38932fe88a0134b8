"""Batch generation across methods and the experiment drivers built on it."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache, partial
from typing import Mapping, Sequence

import numpy as np

from . import analytics as an
from .generators import (
    GenerationError,
    HumanModel,
    calibrate_human,
    gen_noisy_human,
    gen_pnn,
    gen_tsp,
    upsample,
)
from .layout import Basket, Cell, Layout
from .maxent import RewardSpec, sample_retained, solve_cached, soft_value_iteration
from .parallel import ordered_map, stream
from .trajectory import Trajectory

log = logging.getLogger(__name__)

ALL_METHODS = ("tsp", "pnn", "maxent", "noisy_human")


@dataclass(frozen=True)
class MaxEntSettings:
    tau: float = 0.5
    horizon_factor: float = 4.0
    horizon: int | None = None
    w_items: float = 1.0
    w_checkout: float = 0.5
    w_budget: float = 0.5
    w_wrong: float = 0.25
    min_reward: float | None = None
    attempts_per_trajectory: int = 200

    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.w_items, self.w_checkout, self.w_budget, self.w_wrong, self.horizon, self.horizon_factor)


@dataclass(frozen=True)
class BasketMix:
    """Distinct item sets with weights plus a checkout distribution."""

    baskets: tuple[tuple[frozenset[str], float], ...]
    checkouts: tuple[tuple[Cell, float], ...]

    @classmethod
    def from_dict(cls, doc: Mapping) -> BasketMix:
        baskets = tuple((frozenset(b["items"]), float(b["weight"])) for b in doc["mix"])
        checkouts = tuple((tuple(int(v) for v in c["cell"]), float(c["p"])) for c in doc["checkouts"])
        if not baskets or not checkouts:
            raise ValueError("basket mix needs at least one basket and one checkout")
        if any(w < 0 for _, w in baskets + checkouts):
            raise ValueError("basket and checkout weights must be non-negative")
        return cls(baskets, checkouts)

    def to_dict(self) -> dict:
        return {
            "mix": [{"items": sorted(i), "weight": w} for i, w in self.baskets],
            "checkouts": [{"cell": list(c), "p": p} for c, p in self.checkouts],
        }

    def sample(self, n: int, rng: np.random.Generator) -> list[Basket]:
        bw = np.array([w for _, w in self.baskets], dtype=float)
        cw = np.array([p for _, p in self.checkouts], dtype=float)
        bi = rng.choice(len(bw), size=n, p=bw / bw.sum())
        ci = rng.choice(len(cw), size=n, p=cw / cw.sum())
        return [Basket(self.baskets[b][0], self.checkouts[c][0]) for b, c in zip(bi, ci)]

    def all_baskets(self) -> list[Basket]:
        return [Basket(i, c) for i, _ in self.baskets for c, _ in self.checkouts]


@dataclass
class MethodStats:
    method: str
    requested: int
    produced: int
    attempts: int = 0
    solve_seconds: float = 0.0
    distinct_baskets: int = 0
    shortfall: int = 0
    mean_steps: float = 0.0
    seconds: float = 0.0

    @property
    def retention(self) -> float:
        if self.method != "maxent":
            return 1.0
        return (self.requested - self.shortfall) / self.attempts if self.attempts else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retention"] = self.retention
        return d


def distinct_baskets(baskets: Sequence[Basket]) -> list[Basket]:
    """Unique baskets in a canonical order."""
    return sorted(set(baskets), key=lambda b: json.dumps(b.to_dict(), sort_keys=True))


def basket_seed(seed: int, basket: Basket) -> int:
    blob = json.dumps(basket.to_dict(), sort_keys=True).encode()
    return (int(seed) << 32) ^ int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


@lru_cache(maxsize=8)
def _memo_solve(layout: Layout, basket: Basket, spec: RewardSpec, tau: float):
    return soft_value_iteration(layout, basket, spec, tau)


def _maxent_group(args, layout: Layout, settings: MaxEntSettings, seed: int, cache_dir):
    basket, count = args
    spec = settings.reward_spec()
    if cache_dir is None:
        policy = _memo_solve(layout, basket, spec, settings.tau)
    else:
        policy = solve_cached(layout, basket, spec, settings.tau, cache_dir)
    s = basket_seed(seed, basket)
    kept, attempts = sample_retained(
        policy, count, s, settings.min_reward,
        max_attempts=max(count * settings.attempts_per_trajectory, 1000),
    )
    shortfall = count - len(kept)
    if not kept:
        raise GenerationError(f"no maxent rollout met the reward bar for basket {sorted(basket.items)} -> {basket.checkout}")
    if shortfall:
        kept = kept + upsample(kept, shortfall, stream(s, 1))
    return kept, attempts, policy.solve_seconds, shortfall


def _single(args, layout: Layout, method: str, seed: int, model):
    i, basket = args
    rng = stream(seed, i)
    if method == "pnn":
        return gen_pnn(layout, basket, rng)
    return gen_noisy_human(layout, basket, rng, model)


def generate_for_baskets(
    layout: Layout,
    method: str,
    baskets: Sequence[Basket],
    seed: int,
    maxent: MaxEntSettings | None = None,
    human: HumanModel | None = None,
    workers: int = 1,
    cache_dir=None,
) -> tuple[list[Trajectory], MethodStats]:
    """One trajectory per entry of ``baskets`` (same order)."""
    t0 = time.perf_counter()
    stats = MethodStats(method, len(baskets), len(baskets))
    distinct = distinct_baskets(baskets)
    stats.distinct_baskets = len(distinct)
    if method == "tsp":
        plans = {b: gen_tsp(layout, b) for b in distinct}
        out = [plans[b] for b in baskets]
    elif method in ("pnn", "noisy_human"):
        if method == "noisy_human" and human is None:
            raise ValueError("noisy_human generation needs a calibrated model")
        fn = partial(_single, layout=layout, method=method, seed=seed, model=human)
        out = ordered_map(fn, list(enumerate(baskets)), workers)
    elif method == "maxent":
        settings = maxent or MaxEntSettings()
        positions: dict[Basket, list[int]] = {}
        for i, b in enumerate(baskets):
            positions.setdefault(b, []).append(i)
        fn = partial(_maxent_group, layout=layout, settings=settings, seed=seed, cache_dir=cache_dir)
        groups = ordered_map(fn, [(b, len(positions[b])) for b in distinct], workers, chunks_per_worker=1)
        out: list = [None] * len(baskets)
        for b, (trajs, attempts, solve_s, short) in zip(distinct, groups):
            for i, t in zip(positions[b], trajs):
                out[i] = t
            stats.attempts += attempts
            stats.solve_seconds += solve_s
            stats.shortfall += short
    else:
        raise ValueError(f"unknown method {method!r}")
    stats.mean_steps = float(np.mean([len(t) for t in out])) if out else 0.0
    stats.seconds = time.perf_counter() - t0
    return out, stats


def method_seed(seed: int, method: str) -> int:
    return int(np.random.SeedSequence([int(seed), ALL_METHODS.index(method) + 1]).generate_state(1)[0])


def calibrated_human(layout: Layout, baskets: Sequence[Basket], detour_target: float, seed: int, batch: int = 400) -> HumanModel:
    """Calibrate on the trip population itself (the first ``batch`` draws), so the
    detour target holds for the mix of baskets actually generated."""
    return calibrate_human(layout, list(baskets), detour_target, seed=seed, batch=batch)


# -- divergence experiment --------------------------------------------------------------


@dataclass
class DivergenceRow:
    method: str
    jsd_pooled: float
    wd_pooled: float
    jsd_per_basket: float | None = None
    wd_per_basket: float | None = None


@dataclass
class DivergenceResult:
    reference: str
    rows: list[DivergenceRow]
    stats: dict[str, MethodStats]
    occupancy: dict[str, an.OccupancyDistribution] = field(default_factory=dict)
    human: HumanModel | None = None

    def row(self, method: str) -> DivergenceRow:
        return next(r for r in self.rows if r.method == method)

    def table(self) -> str:
        """Tab-separated metric-by-method table (pooled and per-basket averages)."""
        methods = [r.method for r in self.rows]
        lines = ["metric\t" + "\t".join(methods)]
        for label, attr in (
            ("JSD (average heatmap)", "jsd_pooled"),
            ("WD (average heatmap)", "wd_pooled"),
            ("average JSD", "jsd_per_basket"),
            ("average WD", "wd_per_basket"),
        ):
            vals = [getattr(r, attr) for r in self.rows]
            if all(v is None for v in vals):
                continue
            lines.append(label + "\t" + "\t".join("NA" if v is None else f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"


def divergence_experiment(
    layout: Layout,
    mix: BasketMix,
    n: int,
    seed: int,
    methods: Sequence[str] = ("tsp", "pnn", "maxent"),
    reference: str = "noisy_human",
    maxent: MaxEntSettings | None = None,
    human: HumanModel | None = None,
    detour_target: float = 0.28,
    calibration_batch: int = 400,
    per_basket: bool = False,
    workers: int = 1,
    cache_dir=None,
) -> DivergenceResult:
    """Compare each method's occupancy with the reference method's on the same baskets."""
    baskets = mix.sample(n, stream(seed, 1))
    if reference == "noisy_human" and human is None:
        human = calibrated_human(layout, baskets, detour_target, seed, calibration_batch)
    sets, stats = {}, {}
    for m in [reference, *methods]:
        if m in sets:
            continue
        sets[m], stats[m] = generate_for_baskets(layout, m, baskets, method_seed(seed, m), maxent, human, workers, cache_dir)
    occ = {m: an.occupancy(t, layout) for m, t in sets.items()}
    rows = []
    groups: dict[Basket, list[int]] = {}
    if per_basket:
        for i, b in enumerate(baskets):
            groups.setdefault(b, []).append(i)
    for m in methods:
        row = DivergenceRow(m, an.jsd(occ[m], occ[reference]), an.wasserstein(occ[m], occ[reference]))
        if per_basket:
            js, ws, wt = [], [], []
            for b in sorted(groups, key=lambda b: json.dumps(b.to_dict(), sort_keys=True)):
                idx = groups[b]
                p = an.occupancy([sets[m][i] for i in idx], layout)
                q = an.occupancy([sets[reference][i] for i in idx], layout)
                js.append(an.jsd(p, q))
                ws.append(an.wasserstein(p, q))
                wt.append(len(idx))
            row.jsd_per_basket = float(np.average(js, weights=wt))
            row.wd_per_basket = float(np.average(ws, weights=wt))
        rows.append(row)
    return DivergenceResult(reference, rows, stats, occ, human)


# -- impulse-rate estimation ---------------------------------------------------------------


@dataclass
class RateEstimate:
    method: str
    profile: an.ClusterProfile
    traffic: an.ShelfTraffic
    trajectories: list[Trajectory]
    stats: MethodStats


def estimate_rates(
    layout: Layout,
    cluster: an.ClusterProfile,
    method: str,
    baskets: Sequence[Basket],
    seed: int,
    maxent: MaxEntSettings | None = None,
    human: HumanModel | None = None,
    workers: int = 1,
    cache_dir=None,
) -> RateEstimate:
    trajs, stats = generate_for_baskets(layout, method, baskets, seed, maxent, human, workers, cache_dir)
    prof = an.impulse_rates(cluster, trajs, layout)
    return RateEstimate(method, prof, an.shelf_traffic(trajs, layout), trajs, stats)
