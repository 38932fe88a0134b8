"""Impulse-profit objective and single-product repositioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .analytics import ClusterProfile, ShelfTraffic, visit_matrix
from .layout import Cell, Layout, ProductProfile, is_finite_rate
from .trajectory import Trajectory


class NotComputable(ValueError):
    """An impulse rate is undefined (purchases observed without shelf visits)."""


def impulse_profit(p: ProductProfile) -> float:
    if not is_finite_rate(p.impulse_rate):
        raise NotComputable(f"impulse rate of {p.category_id!r} is undefined")
    return p.impulse_rate * p.per_unit_profit


def objective(placements: Layout | Mapping[Cell, str], profiles: Mapping[str, ProductProfile], theta: ShelfTraffic) -> float:
    """Expected impulse profit per trip for a fixed placement."""
    if isinstance(placements, Layout):
        placements = placements.placements
    traffic = theta.as_dict()
    total = 0.0
    for cell, cat in sorted(placements.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if cell not in traffic:
            raise ValueError(f"no shelf traffic for {cell}")
        prof = profiles.get(cat)
        if prof is None:
            continue
        if not is_finite_rate(prof.impulse_rate):
            raise NotComputable(f"impulse rate of {cat!r} on shelf {cell} is undefined")
        total += prof.per_unit_profit * prof.impulse_rate * traffic[cell]
    return total


def rank_unoccupied_shelves(layout: Layout, theta: ShelfTraffic, n: int) -> list[Cell]:
    """The ``n`` busiest empty shelves; equal traffic falls back to scan order."""
    if n < 0:
        raise ValueError("n must be non-negative")
    empty = layout.unoccupied_shelves()
    if len(empty) < n:
        raise ValueError(f"only {len(empty)} unoccupied shelves, {n} requested")
    traffic = theta.as_dict()
    ranked = sorted(empty, key=lambda c: (-traffic[c], c[1], c[0]))
    return ranked[:n]


def select_product(profile: ClusterProfile, layout: Layout, rates: Mapping[str, float] | None = None) -> tuple[str, dict[str, float], bool]:
    """Pick the impulse product with the largest expected profit.

    Returns ``(product, score per product, fell_back)``.  When any rate is
    missing or undefined, every product is scored with its purchase
    probability in place of the rate instead.
    """
    products = sorted(profile.impulse_products)
    if not products:
        raise ValueError(f"cluster {profile.cluster_id} has no impulse products")
    rates = dict(profile.impulse_rates if rates is None else rates)
    fell_back = any(p not in rates or not is_finite_rate(rates[p]) for p in products)
    scores = {}
    for p in products:
        cat = layout.category(p)
        rate = profile.p_purchase[p] if fell_back else rates[p]
        scores[p] = impulse_profit(ProductProfile(p, cat.price, cat.margin, rate))
    best = max(products, key=lambda p: (scores[p], -products.index(p)))
    return best, scores, fell_back


@dataclass(frozen=True)
class Evaluation:
    mc_profit: float
    expected_profit: float
    std_error: float
    visit_frac: Mapping[str, float]
    n_trajectories: int


def evaluate_layout(
    layout: Layout,
    eval_trajs: Sequence[Trajectory],
    rates: ClusterProfile | Mapping[str, float],
    profiles: Mapping[str, ProductProfile] | None = None,
    rng: np.random.Generator | None = None,
) -> Evaluation:
    """Average impulse profit per customer when trips are replayed in ``layout``.

    Each trip gets one purchase chance per impulse product whose shelf it
    passes, taken with probability ``min(1, i_p)``.
    """
    if isinstance(rates, ClusterProfile):
        products = sorted(rates.impulse_products)
        rate_map = dict(rates.impulse_rates)
    else:
        rate_map = dict(rates)
        products = sorted(rate_map)
    missing = [p for p in products if p not in rate_map and layout.category_shelves(p)]
    if missing:
        raise ValueError(f"no impulse rate for placed product(s) {missing}")
    products = [p for p in products if layout.category_shelves(p)]
    if not eval_trajs:
        raise ValueError("no evaluation trajectories")
    rho = {}
    for p in products:
        if profiles is not None and p in profiles:
            rho[p] = profiles[p].per_unit_profit
        else:
            rho[p] = layout.category(p).per_unit_profit
        if not is_finite_rate(rate_map[p]):
            raise NotComputable(f"impulse rate of {p!r} is undefined")
    shelves = visit_matrix(eval_trajs, layout)
    index = layout.shelf_index
    n = len(eval_trajs)
    visits = np.zeros((n, len(products)), dtype=bool)
    for j, p in enumerate(products):
        cols = [index[c] for c in layout.category_shelves(p)]
        visits[:, j] = shelves[:, cols].any(axis=1)
    prob = np.array([min(1.0, rate_map[p]) for p in products])
    value = np.array([rho[p] for p in products])
    frac = visits.mean(axis=0) if n else np.zeros(len(products))
    expected = float(np.sum(frac * prob * value))
    rng = rng if rng is not None else np.random.default_rng(0)
    u = rng.random((n, len(products)))
    per_trip = ((u < prob) & visits) @ value
    se = float(per_trip.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Evaluation(float(per_trip.mean()), expected, se, dict(zip(products, map(float, frac))), n)


# -- report ------------------------------------------------------------------------


@dataclass
class MethodOutcome:
    method: str
    product: str
    shelves: list[Cell]
    scores: dict[str, float]
    fell_back: bool
    rates: dict[str, float]
    original_own: float
    suggested_own: float
    suggested_truth: float


@dataclass
class ProfitReport:
    truth: str
    outcomes: dict[str, MethodOutcome] = field(default_factory=dict)

    def table(self) -> str:
        """Tab-separated layout-by-method table of average profit per customer."""
        methods = list(self.outcomes)
        lines = ["layout\t" + "\t".join(methods)]
        rows = [
            ("original (own trajectories)", "original_own"),
            ("suggested (own trajectories)", "suggested_own"),
            (f"suggested ({self.truth} trajectories)", "suggested_truth"),
        ]
        for label, attr in rows:
            lines.append(label + "\t" + "\t".join(f"{getattr(self.outcomes[m], attr):.6f}" for m in methods))
        return "\n".join(lines) + "\n"

    def choices(self) -> str:
        lines = ["method\tproduct\tshelves\tfallback\t" + "score"]
        for m, o in self.outcomes.items():
            shelves = ";".join(f"{x},{y}" for x, y in o.shelves)
            score = ";".join(f"{p}={v:.6g}" for p, v in sorted(o.scores.items()))
            lines.append(f"{m}\t{o.product}\t{shelves}\t{int(o.fell_back)}\t{score}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "truth": self.truth,
            "methods": {
                m: {
                    "product": o.product,
                    "shelves": [list(c) for c in o.shelves],
                    "fell_back": o.fell_back,
                    "scores": {k: _num(v) for k, v in sorted(o.scores.items())},
                    "rates": {k: _num(v) for k, v in sorted(o.rates.items())},
                    "original_own": o.original_own,
                    "suggested_own": o.suggested_own,
                    "suggested_truth": o.suggested_truth,
                }
                for m, o in self.outcomes.items()
            },
        }


def _num(v: float):
    return "Inf" if math.isinf(v) else v


# -- end-to-end repositioning ----------------------------------------------------------


@dataclass(frozen=True)
class UseCaseConfig:
    checkouts: tuple[tuple[Cell, float], ...]
    n_train: int = 5000
    n_eval: int = 5000
    n_shelves: int = 2
    seed: int = 0
    truth: str = "noisy_human"
    detour_target: float = 0.28
    calibration_batch: int = 400
    maxent: object | None = None  # MaxEntSettings
    workers: int = 1
    cache_dir: str | None = None


def run_usecase3(cluster: ClusterProfile, methods: Sequence[str], layout: Layout, config: UseCaseConfig):
    """Pick, place and evaluate one impulse product per method.

    Every method estimates rates and shelf traffic from its own trips on the
    cluster's essential baskets.  Profits always use the truth method's
    rates; the last report row replays held-out truth trips.  Returns
    ``(report, estimates)``.
    """
    from . import pipeline as pl
    from .analytics import sample_essential_baskets
    from .layout import reposition
    from .parallel import stream

    if not cluster.impulse_products:
        raise ValueError(f"cluster {cluster.cluster_id} has no impulse products")
    checkouts = dict(config.checkouts)
    train = sample_essential_baskets(cluster, checkouts, config.n_train, stream(config.seed, 10))
    held_out = sample_essential_baskets(cluster, checkouts, config.n_eval, stream(config.seed, 11))
    human = None
    order = [config.truth, *[m for m in methods if m != config.truth]]
    if "noisy_human" in order:
        human = pl.calibrated_human(layout, train, config.detour_target, config.seed, config.calibration_batch)

    estimates = {
        m: pl.estimate_rates(layout, cluster, m, train, pl.method_seed(config.seed, m), config.maxent, human, config.workers, config.cache_dir)
        for m in order
    }
    truth_rates = dict(estimates[config.truth].profile.impulse_rates)
    bad = [p for p, r in truth_rates.items() if not is_finite_rate(r)]
    if bad:
        raise NotComputable(f"ground-truth impulse rate undefined for {bad}")
    eval_trajs, _ = pl.generate_for_baskets(
        layout, config.truth, held_out, pl.method_seed(config.seed + 1, config.truth), config.maxent, human, config.workers, config.cache_dir,
    )
    report = ProfitReport(config.truth)
    for k, m in enumerate(order):
        est = estimates[m]
        product, scores, fell_back = select_product(est.profile, layout)
        shelves = rank_unoccupied_shelves(layout, est.traffic, config.n_shelves)
        moved = reposition(layout, product, shelves)

        def profit(lay, trajs, key):
            return evaluate_layout(lay, trajs, truth_rates, rng=stream(config.seed, 20, k, key)).mc_profit

        report.outcomes[m] = MethodOutcome(
            m, product, shelves, scores, fell_back, dict(est.profile.impulse_rates),
            profit(layout, est.trajectories, 0),
            profit(moved, est.trajectories, 1),
            profit(moved, eval_trajs, 2),
        )
    return report, estimates

