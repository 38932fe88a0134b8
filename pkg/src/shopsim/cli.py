"""Command-line entry point.

Commands communicate only through files in a run directory::

    <out>/trajectories/<method>/<basket>.jsonl   generate
    <out>/analysis/                                analyze
    <out>/traffic/                                 traffic
    <out>/cluster/                                 cluster
    <out>/impulse/                                 impulse
    <out>/usecase3/                                usecase3
    <out>/report.txt                               report

Each command also writes ``manifest_<command>.json`` (deterministic) and
``timings_<command>.json`` (wall-clock figures, excluded from reproducibility).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import warnings
from collections import OrderedDict
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from . import analytics as an
from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, get_cluster, load_config, override
from .export import sha256_file, write_grid, write_json, write_pgm, write_table
from .generators import GenerationError
from .layout import Basket, Layout, LayoutError, dump_layout, load_layout, reposition
from .layout_opt import NotComputable, UseCaseConfig, run_usecase3, select_product
from .maxent import RetentionWarning, SolveError
from .parallel import stream
from .trajectory import read_trajectories, write_trajectories

log = logging.getLogger("shopsim")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class NothingToReport(Exception):
    pass


# -- helpers -------------------------------------------------------------------------


def basket_slug(b: Basket) -> str:
    items = "+".join(b.ordered_items) or "none"
    return f"{items}@{b.checkout[0]}_{b.checkout[1]}"


def parse_cell(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}") from exc
    return x, y


def _versions() -> dict:
    import scipy
    import sklearn

    return {"shopsim": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _manifest(out: Path, command: str, cfg: ExperimentConfig, layout: Layout, extra: dict, files: Sequence[Path]) -> None:
    doc = {
        "command": command,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "versions": _versions(),
        "layout_hash": layout.content_hash,
        "files": {str(f.relative_to(out)): sha256_file(f) for f in sorted(files)},
        "config": _stable_config(cfg),
        **extra,
    }
    write_json(out / f"manifest_{command}.json", doc)


def _stable_config(cfg: ExperimentConfig) -> dict:
    """Config minus where and how wide it ran, so reruns elsewhere match byte for byte."""
    d = cfg.to_dict()
    d.pop("output")
    d.pop("workers")
    return d


def _timings(out: Path, command: str, cfg: ExperimentConfig, data: dict) -> None:
    """Sidecar for everything that varies between identical reruns."""
    write_json(out / f"timings_{command}.json", {"output": str(cfg.output), "workers": cfg.workers, **data})


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = dict(
        output=Path(args.out) if getattr(args, "out", None) else None,
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        count=getattr(args, "count", None) if args.command == "generate" else None,
        maxent_tau=getattr(args, "tau", None),
        maxent_horizon_factor=getattr(args, "horizon_factor", None),
        human_detour_target=getattr(args, "detour_target", None),
    )
    if getattr(args, "layout", None):
        changes["layout"] = Path(args.layout)
    mr = getattr(args, "min_reward", None)
    if mr is not None and mr != "default":
        try:
            changes["maxent_min_reward"] = float(mr)
        except ValueError as exc:
            raise ConfigError(f"--min-reward expects a number or 'default', got {mr!r}") from exc
    cfg = override(cfg, **changes)
    if getattr(args, "method", None):
        cfg = override(cfg, methods=tuple(args.method))
    if args.command in ("impulse", "usecase3") and args.count is not None:
        # --count sizes both the training and held-out trip sets
        cfg = override(cfg, usecase=replace(cfg.usecase, n_train=args.count, n_eval=args.count))
    return cfg


def _load_sets(out: Path) -> dict[str, dict[str, list]]:
    root = out / "trajectories"
    if not root.is_dir():
        raise FileNotFoundError(f"no trajectories under {root}; run 'generate' first")
    sets: dict[str, dict[str, list]] = OrderedDict()
    for mdir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(mdir.glob("*.jsonl"))
        if files:
            sets[mdir.name] = OrderedDict((f.stem, read_trajectories(f)) for f in files)
    if not sets:
        raise FileNotFoundError(f"no trajectory files under {root}")
    return sets


def _flatten(groups: dict[str, list]) -> list:
    return [t for k in groups for t in groups[k]]


# -- commands ------------------------------------------------------------------------


def cmd_validate_layout(args) -> int:
    layout = load_layout(Path(args.layout))
    print(f"ok: {layout.name or args.layout} {layout.width}x{layout.height}, "
          f"{len(layout.walkable_cells)} walkable cells, {len(layout.shelf_cells)} shelves "
          f"({len(layout.unoccupied_shelves())} unoccupied), {len(layout.checkout_ids)} checkouts")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    methods = list(cfg.methods) if args.method else list(dict.fromkeys([*cfg.methods, cfg.reference]))
    if args.basket is not None:
        items = [s.strip() for s in args.basket.split(",") if s.strip()]
        checkout = args.checkout or cfg.baskets.checkouts[0][0]
        baskets = [Basket(items, checkout)] * cfg.count
    else:
        baskets = cfg.baskets.sample(cfg.count, stream(cfg.seed, 1))
    for b in set(baskets):
        bad = b.items - set(layout.category_ids)
        if bad:
            raise ConfigError(f"unknown basket item(s) {sorted(bad)}")
        if b.checkout not in layout.checkout_ids:
            raise ConfigError(f"{b.checkout} is not a checkout of the layout")
    human = None
    if "noisy_human" in methods:
        human = pl.calibrated_human(layout, baskets, cfg.human.detour_target, cfg.seed, cfg.human.calibration_batch)
    files, stats, timings = [], {}, {}
    for m in methods:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RetentionWarning)
            trajs, st = pl.generate_for_baskets(layout, m, baskets, pl.method_seed(cfg.seed, m), cfg.maxent, human, cfg.workers)
        for w in caught:
            print(f"warning: {m}: {w.message}", file=sys.stderr)
        groups: dict[str, list] = OrderedDict()
        for b, t in zip(baskets, trajs):
            groups.setdefault(basket_slug(b), []).append(t)
        mdir = out / "trajectories" / m
        mdir.mkdir(parents=True, exist_ok=True)
        for old in mdir.glob("*.jsonl"):
            old.unlink()
        for slug in sorted(groups):
            path = mdir / f"{slug}.jsonl"
            write_trajectories(path, groups[slug])
            files.append(path)
        d = st.to_dict()
        timings[m] = {"solve_seconds": d.pop("solve_seconds"), "seconds": d.pop("seconds")}
        stats[m] = d
        print(f"{m}: {st.produced} trajectories, retention {st.retention:.4f}, mean steps {st.mean_steps:.2f}")
    extra = {"methods": stats, "count": cfg.count}
    if human is not None:
        extra["human_model"] = {"spread": human.spread, "detour_target": human.detour_target, "achieved_ratio": human.achieved_ratio}
    _manifest(out, "generate", cfg, layout, extra, files)
    _timings(out, "generate", cfg, timings)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    sets = _load_sets(out)
    ref = args.reference or cfg.reference
    if ref not in sets:
        raise FileNotFoundError(f"reference trajectories '{ref}' missing under {out / 'trajectories'}")
    methods = [m for m in pl.ALL_METHODS if m in sets and m != ref]
    adir = out / "analysis"
    adir.mkdir(parents=True, exist_ok=True)
    files = []
    occ = {m: an.occupancy(_flatten(sets[m]), layout) for m in [*methods, ref]}
    for m, d in occ.items():
        for ext, writer in ((".pgm", lambda p, g: write_pgm(p, g, 4)), (".txt", write_grid)):
            p = adir / f"heatmap_{m}{ext}"
            writer(p, d.mass)
            files.append(p)
    rows = {}
    for m in methods:
        r = {"jsd_pooled": an.jsd(occ[m], occ[ref]), "wd_pooled": an.wasserstein(occ[m], occ[ref])}
        if not args.no_per_basket:
            js, ws, wt = [], [], []
            for slug in sorted(set(sets[m]) & set(sets[ref])):
                p = an.occupancy(sets[m][slug], layout)
                q = an.occupancy(sets[ref][slug], layout)
                js.append(an.jsd(p, q))
                ws.append(an.wasserstein(p, q))
                wt.append(len(sets[ref][slug]))
            r["jsd_per_basket"] = float(np.average(js, weights=wt)) if wt else None
            r["wd_per_basket"] = float(np.average(ws, weights=wt)) if wt else None
        rows[m] = r
    labels = [("JSD (average heatmap)", "jsd_pooled"), ("WD (average heatmap)", "wd_pooled")]
    if not args.no_per_basket:
        labels += [("average JSD", "jsd_per_basket"), ("average WD", "wd_per_basket")]
    p = adir / "divergence.tsv"
    write_table(p, ["metric", *methods], [[label, *[rows[m][k] for m in methods]] for label, k in labels])
    files.append(p)
    print(p.read_text(), end="")
    _manifest(out, "analyze", cfg, layout, {"reference": ref, "methods": methods, "divergence": rows}, files)
    return EXIT_OK


def cmd_traffic(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    sets = _load_sets(out)
    tdir = out / "traffic"
    tdir.mkdir(parents=True, exist_ok=True)
    files, theta = [], {}
    for m, groups in sets.items():
        th = an.shelf_traffic(_flatten(groups), layout)
        theta[m] = th
        for ext, writer in ((".pgm", lambda p, g: write_pgm(p, g, 4)), (".txt", write_grid)):
            p = tdir / f"traffic_{m}{ext}"
            writer(p, th.grid(layout))
            files.append(p)
    methods = list(sets)
    rows = [[f"{x},{y}", layout.placements.get((x, y), ""), *[theta[m][(x, y)] for m in methods]] for x, y in layout.shelf_cells]
    p = tdir / "shelf_traffic.tsv"
    write_table(p, ["shelf", "category", *methods], rows)
    files.append(p)
    top = {}
    for m in methods:
        empty = layout.unoccupied_shelves()
        ranked = sorted(empty, key=lambda c: (-theta[m][c], c[1], c[0]))[: args.top]
        top[m] = [[c[0], c[1], theta[m][c]] for c in ranked]
    _manifest(out, "traffic", cfg, layout, {"top_unoccupied": top}, files)
    print(f"shelf traffic for {', '.join(methods)} written to {tdir}")
    return EXIT_OK


def _read_basket_counts(path: Path) -> list[tuple[list[str], float]]:
    doc = yaml.safe_load(path.read_text())
    entries = doc.get("mix", doc) if isinstance(doc, dict) else doc
    return [(list(e["items"]), float(e.get("weight", e.get("count", 1)))) for e in entries]


def cmd_cluster(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    if args.baskets:
        baskets = _read_basket_counts(Path(args.baskets))
    else:
        baskets = [(sorted(i), w) for i, w in cfg.baskets.baskets]
    cats = list(layout.category_ids)
    res = an.cluster_baskets(baskets, cats, k_max=args.k_max, seed=cfg.seed)
    cdir = out / "cluster"
    cdir.mkdir(parents=True, exist_ok=True)
    files = [cdir / "clusters.tsv", cdir / "wcss.tsv", cdir / "clusters.yaml"]
    write_table(files[0], ["category", *[f"cluster {p.cluster_id}" for p in res.profiles]],
                [[layout.category(c).name, *[p.p_purchase[c] for p in res.profiles]] for c in cats])
    write_table(files[1], ["k", "wcss"], [[str(k + 1), w] for k, w in enumerate(res.wcss)])
    doc = {"threshold": an.IMPULSE_THRESHOLD, "clusters": [
        {"id": p.cluster_id, "weight": round(p.weight, 12), "p_purchase": {c: round(p.p_purchase[c], 12) for c in cats}}
        for p in res.profiles
    ]}
    files[2].write_text(yaml.safe_dump(doc, sort_keys=False))
    _manifest(out, "cluster", cfg, layout, {"k": res.k}, files)
    print(f"{res.k} clusters from {len(baskets)} distinct baskets")
    return EXIT_OK


def _cluster(cfg: ExperimentConfig, cluster_id: int | None) -> an.ClusterProfile:
    if cfg.clusters is None:
        raise ConfigError("config has no 'clusters' file")
    return get_cluster(cfg.clusters, cluster_id or cfg.usecase.cluster)


def cmd_impulse(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    cluster = _cluster(cfg, args.cluster)
    products = sorted(cluster.impulse_products)
    checkouts = dict(cfg.baskets.checkouts)
    train = an.sample_essential_baskets(cluster, checkouts, cfg.usecase.n_train, stream(cfg.seed, 10))
    methods = list(dict.fromkeys([*cfg.methods, cfg.usecase.truth]))
    human = None
    if "noisy_human" in methods:
        human = pl.calibrated_human(layout, train, cfg.human.detour_target, cfg.seed, cfg.human.calibration_batch)
    est = {m: pl.estimate_rates(layout, cluster, m, train, pl.method_seed(cfg.seed, m), cfg.maxent, human, cfg.workers) for m in methods}
    idir = out / "impulse"
    idir.mkdir(parents=True, exist_ok=True)
    files = [idir / "impulse_rates.tsv", idir / "impulse_profit.tsv", idir / "visit_probability.tsv"]
    names = {p: layout.category(p).name for p in products}
    write_table(files[0], ["product", *methods], [[names[p], *[est[m].profile.impulse_rates[p] for m in methods]] for p in products])
    write_table(files[2], ["product", *methods], [[names[p], *[est[m].profile.p_visit_shelf[p] for m in methods]] for p in products])
    rate_rows, profit_rows, picks = [], [], {}
    for m in methods:
        best, scores, fell_back = select_product(est[m].profile, layout)
        used = {p: (cluster.p_purchase[p] if fell_back else est[m].profile.impulse_rates[p]) for p in products}
        rate_rows.append(["i_p", m, *[used[p] for p in products]])
        profit_rows.append(["pi_p", m, *[scores[p] for p in products]])
        picks[m] = {"product": best, "fell_back": fell_back}
    write_table(files[1], ["metric", "method", *[names[p] for p in products]], rate_rows + profit_rows)
    rates_json = {m: {p: ("Inf" if math.isinf(v) else v) for p, v in est[m].profile.impulse_rates.items()} for m in methods}
    stats, timings = {}, {}
    for m in methods:
        d = est[m].stats.to_dict()
        timings[m] = {"solve_seconds": d.pop("solve_seconds"), "seconds": d.pop("seconds")}
        stats[m] = d
    _manifest(out, "impulse", cfg, layout, {"cluster": cluster.cluster_id, "rates": rates_json, "choice": picks, "methods": stats}, files)
    _timings(out, "impulse", cfg, timings)
    print(files[0].read_text(), end="")
    return EXIT_OK


def cmd_usecase3(args) -> int:
    cfg = _config(args)
    layout = cfg.load_layout()
    out = Path(cfg.output)
    cluster = _cluster(cfg, args.cluster)
    uc = UseCaseConfig(
        checkouts=cfg.baskets.checkouts,
        n_train=cfg.usecase.n_train,
        n_eval=cfg.usecase.n_eval,
        n_shelves=cfg.usecase.n_shelves,
        seed=cfg.seed,
        truth=cfg.usecase.truth,
        detour_target=cfg.human.detour_target,
        calibration_batch=cfg.human.calibration_batch,
        maxent=cfg.maxent,
        workers=cfg.workers,
    )
    t0 = time.perf_counter()
    report, _ = run_usecase3(cluster, list(cfg.methods), layout, uc)
    udir = out / "usecase3"
    udir.mkdir(parents=True, exist_ok=True)
    files = [udir / "profit.tsv", udir / "choices.tsv", udir / "usecase3.json"]
    files[0].write_text(report.table())
    files[1].write_text(report.choices())
    write_json(files[2], report.to_dict())
    hashes = {}
    for m, o in report.outcomes.items():
        moved = reposition(layout, o.product, o.shelves)
        p = udir / f"layout_{m}.yaml"
        p.write_text(dump_layout(moved))
        files.append(p)
        hashes[m] = moved.content_hash
    _manifest(out, "usecase3", cfg, layout, {"cluster": cluster.cluster_id, "suggested_layout_hashes": hashes}, files)
    _timings(out, "usecase3", cfg, {"seconds": time.perf_counter() - t0})
    print(report.table(), end="")
    return EXIT_OK


REPORT_PARTS = (
    ("Divergence from the reference trajectories", "analysis/divergence.tsv"),
    ("Shelf traffic", "traffic/shelf_traffic.tsv"),
    ("Basket clusters (purchase probability)", "cluster/clusters.tsv"),
    ("Impulse rates", "impulse/impulse_rates.tsv"),
    ("Impulse rates and per-unit impulse profit", "impulse/impulse_profit.tsv"),
    ("Repositioning choices", "usecase3/choices.tsv"),
    ("Average impulse profit per customer", "usecase3/profit.tsv"),
)


def cmd_report(args) -> int:
    run = Path(args.run)
    present = [(t, run / rel) for t, rel in REPORT_PARTS if (run / rel).exists()]
    if not present:
        raise NothingToReport(f"nothing to report in {run}")
    missing = [rel for _, rel in REPORT_PARTS if not (run / rel).exists()]
    sections = []
    for title, path in present:
        sections.append(f"== {title} ({path.relative_to(run)}) ==\n{path.read_text()}")
    if missing:
        sections.append("== Missing artifacts ==\n" + "\n".join(missing) + "\n")
    heatmaps = sorted(str(p.relative_to(run)) for d in ("analysis", "traffic") if (run / d).is_dir() for p in (run / d).glob("*.pgm"))
    if heatmaps:
        sections.append("== Heatmaps ==\n" + "\n".join(heatmaps) + "\n")
    text = "\n".join(sections)
    (run / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, run_opts: bool = True) -> None:
    p.add_argument("--config", help="experiment YAML (default: bundled fixture experiment)")
    p.add_argument("--layout", help="layout YAML, overrides the config")
    p.add_argument("--out", help="run directory, overrides the config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="worker processes; results do not depend on this")
    if run_opts:
        p.add_argument("--count", type=int, help="trajectories per method")
        p.add_argument("--tau", type=float, help="maxent temperature")
        p.add_argument("--horizon-factor", type=float, help="maxent horizon as a multiple of the TSP step count")
        p.add_argument("--min-reward", help="maxent retention threshold, or 'default'")
        p.add_argument("--detour-target", type=float, help="synthetic-human mean detour over TSP")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shopsim", description="Store customer-trajectory simulation and layout analytics.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-layout", help="check a layout file")
    p.add_argument("layout")
    p.set_defaults(func=cmd_validate_layout)

    p = sub.add_parser("generate", help="generate trajectories per method")
    _common(p)
    p.add_argument("--method", action="append", choices=pl.ALL_METHODS, help="repeatable; default: config methods plus the reference")
    p.add_argument("--basket", help="comma-separated category ids for a single fixed basket")
    p.add_argument("--checkout", type=parse_cell, help="checkout cell 'x,y' for --basket")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="occupancy heatmaps and divergence from the reference")
    _common(p, run_opts=False)
    p.add_argument("--reference", choices=pl.ALL_METHODS)
    p.add_argument("--no-per-basket", action="store_true", help="skip per-basket averages")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("traffic", help="shelf traffic density per method")
    _common(p, run_opts=False)
    p.add_argument("--top", type=int, default=2, help="busiest unoccupied shelves to list")
    p.set_defaults(func=cmd_traffic)

    p = sub.add_parser("cluster", help="cluster baskets into customer types")
    _common(p, run_opts=False)
    p.add_argument("--baskets", help="YAML list of {items, weight}; default: the config basket mix")
    p.add_argument("--k-max", type=int, default=8)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("impulse", help="estimate impulse rates per method")
    _common(p)
    p.add_argument("--method", action="append", choices=pl.ALL_METHODS)
    p.add_argument("--cluster", type=int)
    p.set_defaults(func=cmd_impulse)

    p = sub.add_parser("usecase3", help="reposition one impulse product per method and evaluate")
    _common(p)
    p.add_argument("--method", action="append", choices=pl.ALL_METHODS)
    p.add_argument("--cluster", type=int)
    p.set_defaults(func=cmd_usecase3)

    p = sub.add_parser("report", help="collect tables from a run directory")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NothingToReport as exc:
        _error("nothing-to-report", str(exc), EXIT_VALIDATION)
        return EXIT_VALIDATION
    except (ConfigError, LayoutError, FileNotFoundError) as exc:
        _error(type(exc).__name__, str(exc), EXIT_VALIDATION)
        return EXIT_VALIDATION
    except (GenerationError, SolveError, NotComputable) as exc:
        _error(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort runtime error record
        log.debug("unhandled error", exc_info=True)
        _error(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME


def _error(kind: str, message: str, code: int) -> None:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
