"""Trajectory-set statistics: occupancy, divergences, shelf traffic, basket
clusters and impulse-rate estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from sklearn.cluster import KMeans

from .layout import Basket, Cell, Layout
from .trajectory import Trajectory

IMPULSE_THRESHOLD = 0.20


class AnalyticsError(ValueError):
    pass


# -- occupancy -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OccupancyDistribution:
    mass: np.ndarray  # (height, width), sums to 1

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if (m < 0).any():
            raise AnalyticsError("negative occupancy mass")
        if abs(m.sum() - 1.0) > 1e-9:
            raise AnalyticsError(f"occupancy mass sums to {m.sum()!r}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mass", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape


def _as_mass(d) -> np.ndarray:
    return d.mass if isinstance(d, OccupancyDistribution) else np.asarray(d, dtype=float)


def occupancy(trajs: Sequence[Trajectory], layout: Layout, weights: Sequence[float] | None = None) -> OccupancyDistribution:
    """Per-cell visit counts over every step (revisits count), normalised to one.

    ``weights`` scales each trajectory's contribution; it lets a deterministic
    generator stand in for an upsampled set without copying it.
    """
    if len(trajs) == 0:
        raise AnalyticsError("occupancy of an empty trajectory set")
    counts = np.zeros(layout.width * layout.height)
    for i, t in enumerate(trajs):
        flat = t.states[:, 1].astype(np.int64) * layout.width + t.states[:, 0]
        w = 1.0 if weights is None else float(weights[i])
        counts += w * np.bincount(flat, minlength=counts.size)
    total = counts.sum()
    if total <= 0:
        raise AnalyticsError("trajectory set has no steps")
    mass = (counts / total).reshape(layout.height, layout.width)
    if mass[~layout.walkable].any():
        raise AnalyticsError("occupancy mass on a non-walkable cell")
    return OccupancyDistribution(mass / mass.sum())


def mix(dists: Sequence[OccupancyDistribution], weights: Sequence[float]) -> OccupancyDistribution:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    m = sum(wi * d.mass for wi, d in zip(w, dists))
    return OccupancyDistribution(m / m.sum())


# -- divergences ---------------------------------------------------------------------


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits (range [0, 1])."""
    P, Q = _as_mass(p), _as_mass(q)
    if P.shape != Q.shape:
        raise AnalyticsError(f"shape mismatch {P.shape} vs {Q.shape}")
    P = P.ravel() / P.sum()
    Q = Q.ravel() / Q.sum()
    M = 0.5 * (P + Q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / M[nz])))

    return min(1.0, max(0.0, 0.5 * kl(P) + 0.5 * kl(Q)))


def cell_centres(shape: tuple[int, int]) -> np.ndarray:
    """Cell-centre coordinates ``(x, y)`` scaled so the grid diagonal has length 1."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    pts = np.column_stack([xs.ravel() + 0.5, ys.ravel() + 0.5])
    return pts / math.hypot(w, h)


def wasserstein(p, q) -> float:
    """Exact earth mover's distance with a Euclidean ground metric on cell centres.

    Mass shared by both distributions stays put (optimal for a metric cost),
    so only the surplus of ``p`` is routed to the deficit of ``q``.  The
    transport problem is solved as a linear program over those cells.
    """
    P, Q = _as_mass(p), _as_mass(q)
    if P.shape != Q.shape:
        raise AnalyticsError(f"shape mismatch {P.shape} vs {Q.shape}")
    if abs(P.sum() - Q.sum()) > 1e-6:
        raise AnalyticsError(f"mass mismatch {P.sum()} vs {Q.sum()}")
    diff = (P / P.sum() - Q / Q.sum()).ravel()
    src = np.flatnonzero(diff > 1e-15)
    dst = np.flatnonzero(diff < -1e-15)
    if src.size == 0 or dst.size == 0:
        return 0.0
    supply = diff[src]
    demand = -diff[dst]
    demand *= supply.sum() / demand.sum()
    pts = cell_centres(P.shape)
    cost = np.linalg.norm(pts[src][:, None, :] - pts[dst][None, :, :], axis=2)
    if src.size == 1 or dst.size == 1:
        # a single source or sink leaves no routing choice
        flows = np.outer(supply, demand) / supply.sum()
        return float(np.sum(flows * cost))
    ns, nd = src.size, dst.size
    cols = np.arange(ns * nd)
    a_rows = sparse.csr_matrix((np.ones(ns * nd), (np.repeat(np.arange(ns), nd), cols)), shape=(ns, ns * nd))
    b_rows = sparse.csr_matrix((np.ones(ns * nd), (np.tile(np.arange(nd), ns), cols)), shape=(nd, ns * nd))
    res = linprog(
        cost.ravel(),
        A_eq=sparse.vstack([a_rows, b_rows[:-1]]),
        b_eq=np.concatenate([supply, demand[:-1]]),
        bounds=(0, None),
        method="highs",
    )
    if res.status != 0:
        raise AnalyticsError(f"transport LP failed: {res.message}")
    return float(res.fun)


# -- shelf traffic ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShelfTraffic:
    """Fraction of trips passing next to each shelf cell."""

    shelves: tuple[Cell, ...]
    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float).copy()
        if ((th < 0) | (th > 1 + 1e-12)).any():
            raise AnalyticsError("shelf traffic outside [0, 1]")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)

    def __getitem__(self, cell: Cell) -> float:
        return float(self.theta[self.shelves.index(tuple(cell))])

    def as_dict(self) -> dict[Cell, float]:
        return {c: float(v) for c, v in zip(self.shelves, self.theta)}

    def grid(self, layout: Layout) -> np.ndarray:
        out = np.full((layout.height, layout.width), np.nan)
        for (x, y), v in zip(self.shelves, self.theta):
            out[y, x] = v
        return out


def visit_matrix(trajs: Sequence[Trajectory], layout: Layout) -> np.ndarray:
    """Boolean ``(n_trajs, n_shelves)``: trajectory came within one cell of shelf."""
    widx = layout.walkable_index
    w = layout.width
    lookup = np.full(layout.width * layout.height, -1, dtype=np.int64)
    for c, i in widx.items():
        lookup[c[1] * w + c[0]] = i
    rows, cols = [], []
    for r, t in enumerate(trajs):
        flat = np.unique(t.states[:, 1].astype(np.int64) * w + t.states[:, 0])
        idx = lookup[flat]
        cols.append(idx[idx >= 0])
        rows.append(np.full(len(cols[-1]), r))
    if not trajs:
        return np.zeros((0, len(layout.shelf_cells)), dtype=bool)
    visited = sparse.csr_matrix(
        (np.ones(sum(len(c) for c in cols)), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(trajs), len(widx)),
    )
    adj = sparse.csr_matrix(layout.shelf_adjacency.astype(float))
    return np.asarray((visited @ adj).todense()) > 0


def shelf_traffic(trajs: Sequence[Trajectory], layout: Layout, weights: Sequence[float] | None = None) -> ShelfTraffic:
    if len(trajs) == 0:
        raise AnalyticsError("shelf traffic of an empty trajectory set")
    visits = visit_matrix(trajs, layout)
    w = np.ones(len(trajs)) if weights is None else np.asarray(weights, dtype=float)
    theta = (w @ visits) / w.sum()
    return ShelfTraffic(layout.shelf_cells, np.clip(theta, 0.0, 1.0))


# -- basket clustering -------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterProfile:
    cluster_id: int
    p_purchase: Mapping[str, float]
    weight: float = 1.0
    threshold: float = IMPULSE_THRESHOLD
    p_visit_shelf: Mapping[str, float] = field(default_factory=dict)
    impulse_rates: Mapping[str, float] = field(default_factory=dict)

    @property
    def impulse_products(self) -> tuple[str, ...]:
        return tuple(c for c, p in self.p_purchase.items() if 0 < p < self.threshold)

    @property
    def essential_products(self) -> tuple[str, ...]:
        return tuple(c for c, p in self.p_purchase.items() if p >= self.threshold)

    def is_impulse(self, category: str) -> bool:
        return 0 < self.p_purchase.get(category, 0.0) < self.threshold


@dataclass(frozen=True)
class Clustering:
    profiles: tuple[ClusterProfile, ...]
    wcss: tuple[float, ...]  # index k-1 holds the score for k clusters
    k: int
    labels: tuple[int, ...]


def elbow(wcss: Sequence[float]) -> int:
    """Cluster count at the largest second difference of the WCSS curve."""
    w = list(wcss)
    if len(w) == 1:
        return 1
    if len(w) == 2:
        return 2 if w[1] < w[0] else 1
    second = [w[k - 1] - 2 * w[k] + w[k + 1] for k in range(1, len(w) - 1)]
    if max(second) <= 1e-12:
        return 1
    return int(np.argmax(second)) + 2


def cluster_baskets(
    baskets: Sequence[tuple[Sequence[str], float]],
    categories: Sequence[str],
    k_max: int = 8,
    threshold: float = IMPULSE_THRESHOLD,
    seed: int = 0,
) -> Clustering:
    """Weighted k-means over category-indicator vectors, k chosen by the elbow rule.

    ``baskets`` pairs each distinct item set with its frequency.
    """
    if k_max < 2:
        raise AnalyticsError("k_max must be at least 2")
    cats = list(categories)
    X = np.array([[1.0 if c in set(items) else 0.0 for c in cats] for items, _ in baskets])
    w = np.array([float(f) for _, f in baskets])
    if len(X) == 0:
        raise AnalyticsError("no baskets to cluster")
    distinct = len({tuple(r) for r in X})
    k_top = min(k_max, distinct)
    wcss, fits = [], []
    for k in range(1, k_top + 1):
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(X, sample_weight=w)
        wcss.append(float(km.inertia_))
        fits.append(km.labels_)
    k = elbow(wcss) if distinct >= 2 else 1
    raw_labels = fits[k - 1]
    # stable cluster numbering: by descending weight, then by centroid
    groups = []
    for lab in range(k):
        sel = raw_labels == lab
        centroid = (w[sel] @ X[sel]) / w[sel].sum()
        groups.append((-w[sel].sum(), tuple(-centroid), lab, centroid, w[sel].sum()))
    groups.sort()
    relabel = {g[2]: i for i, g in enumerate(groups)}
    total = w.sum()
    profiles = tuple(
        ClusterProfile(i + 1, {c: float(p) for c, p in zip(cats, g[3])}, float(g[4] / total), threshold)
        for i, g in enumerate(groups)
    )
    labels = tuple(relabel[int(l)] + 1 for l in raw_labels)
    return Clustering(profiles, tuple(wcss), k, labels)


# -- impulse rates ------------------------------------------------------------------------


def impulse_rates(profile: ClusterProfile, essential_trajs: Sequence[Trajectory], layout: Layout, weights: Sequence[float] | None = None) -> ClusterProfile:
    """Invert purchase = visit x impulse-rate for each impulse product.

    A product on several shelves is visited with the summed shelf traffic,
    capped at 1.  Purchases without any shelf visit give ``inf``.
    """
    products = profile.impulse_products
    if not products:
        return profile
    theta = shelf_traffic(essential_trajs, layout, weights).as_dict()
    visit, rates = {}, {}
    for p in products:
        pv = min(1.0, sum(theta.get(c, 0.0) for c in layout.category_shelves(p)))
        pp = profile.p_purchase[p]
        visit[p] = pv
        if pp == 0:
            rates[p] = 0.0
        elif pv == 0:
            rates[p] = math.inf
        else:
            rates[p] = pp / pv
    return replace(profile, p_visit_shelf=visit, impulse_rates=rates)


def sample_essential_baskets(
    profile: ClusterProfile,
    checkout_probs: Mapping[Cell, float],
    n: int,
    rng: np.random.Generator,
) -> list[Basket]:
    """Baskets holding each essential product independently with its purchase probability."""
    essentials = sorted(profile.essential_products)
    checkouts = list(checkout_probs)
    probs = np.array([checkout_probs[c] for c in checkouts], dtype=float)
    probs /= probs.sum()
    draws = rng.random((n, len(essentials)))
    picks = rng.choice(len(checkouts), size=n, p=probs)
    out = []
    for i in range(n):
        items = [e for j, e in enumerate(essentials) if draws[i, j] < profile.p_purchase[e]]
        out.append(Basket(items, checkouts[picks[i]]))
    return out
