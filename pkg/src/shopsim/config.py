"""Experiment configuration files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .analytics import IMPULSE_THRESHOLD, ClusterProfile
from .layout import Layout, load_layout
from .pipeline import ALL_METHODS, BasketMix, MaxEntSettings

DATA_DIR = Path(__file__).parent / "data"
BUILTIN_CONFIG = DATA_DIR / "experiment.yaml"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HumanSettings:
    detour_target: float = 0.28
    calibration_batch: int = 400


@dataclass(frozen=True)
class UseCaseSettings:
    cluster: int = 2
    n_train: int = 5000
    n_eval: int = 5000
    n_shelves: int = 2
    truth: str = "noisy_human"


@dataclass(frozen=True)
class ExperimentConfig:
    layout: Path
    baskets: BasketMix
    clusters: Path | None = None
    output: Path = Path("runs/default")
    seed: int = 0
    workers: int = 1
    methods: tuple[str, ...] = ("tsp", "pnn", "maxent")
    reference: str = "noisy_human"
    count: int = 5000
    maxent: MaxEntSettings = field(default_factory=MaxEntSettings)
    human: HumanSettings = field(default_factory=HumanSettings)
    usecase: UseCaseSettings = field(default_factory=UseCaseSettings)

    def __post_init__(self):
        unknown = [m for m in (*self.methods, self.reference, self.usecase.truth) if m not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {list(ALL_METHODS)}")
        if self.count < 1:
            raise ConfigError("count must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if not Path(self.layout).exists():
            raise ConfigError(f"layout file not found: {self.layout}")
        if self.clusters is not None and not Path(self.clusters).exists():
            raise ConfigError(f"cluster file not found: {self.clusters}")
        if self.maxent.tau <= 0:
            raise ConfigError("maxent.tau must be positive")

    def load_layout(self) -> Layout:
        return load_layout(Path(self.layout))

    def to_dict(self) -> dict:
        d = {
            "layout": str(self.layout),
            "clusters": None if self.clusters is None else str(self.clusters),
            "output": str(self.output),
            "seed": self.seed,
            "workers": self.workers,
            "methods": list(self.methods),
            "reference": self.reference,
            "count": self.count,
            "maxent": asdict(self.maxent),
            "human": asdict(self.human),
            "usecase": asdict(self.usecase),
            "baskets": self.baskets.to_dict(),
        }
        return d

    def content_hash(self) -> str:
        """Hash of everything that affects results (paths replaced by file contents, workers excluded)."""
        d = self.to_dict()
        d.pop("workers")
        d.pop("output")
        d["layout"] = hashlib.sha256(Path(self.layout).read_bytes()).hexdigest()
        if self.clusters is not None:
            d["clusters"] = hashlib.sha256(Path(self.clusters).read_bytes()).hexdigest()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def resolve_path(value: str | Path, base: Path) -> Path:
    """Relative to ``base``; falls back to the bundled data directory."""
    p = Path(value)
    if p.is_absolute():
        return p
    cand = base / p
    if cand.exists():
        return cand
    bundled = DATA_DIR / p
    return bundled if bundled.exists() else cand


def _section(cls, doc: Mapping | None, where: str):
    doc = dict(doc or {})
    names = {f.name for f in fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")
    return cls(**doc)


_TOP = {"layout", "clusters", "output", "seed", "workers", "methods", "reference", "count", "maxent", "human", "usecase", "baskets"}


def config_from_dict(doc: Mapping[str, Any], base: Path = Path(".")) -> ExperimentConfig:
    extra = set(doc) - _TOP
    if extra:
        raise ConfigError(f"unknown config key(s): {sorted(extra)}")
    if "layout" not in doc:
        raise ConfigError("config needs a 'layout' entry")
    if "baskets" not in doc:
        raise ConfigError("config needs a 'baskets' entry")
    try:
        mix = BasketMix.from_dict(doc["baskets"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid baskets section: {exc}") from exc
    try:
        return ExperimentConfig(
            layout=resolve_path(doc["layout"], base),
            baskets=mix,
            clusters=None if doc.get("clusters") is None else resolve_path(doc["clusters"], base),
            output=Path(doc.get("output", "runs/default")),
            seed=int(doc.get("seed", 0)),
            workers=int(doc.get("workers", 1)),
            methods=tuple(doc.get("methods", ("tsp", "pnn", "maxent"))),
            reference=str(doc.get("reference", "noisy_human")),
            count=int(doc.get("count", 5000)),
            maxent=_section(MaxEntSettings, doc.get("maxent"), "maxent"),
            human=_section(HumanSettings, doc.get("human"), "human"),
            usecase=_section(UseCaseSettings, doc.get("usecase"), "usecase"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    path = Path(path) if path is not None else BUILTIN_CONFIG
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a mapping")
    return config_from_dict(doc, path.parent)


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Apply flag overrides; ``None`` values leave the config untouched."""
    top = {k: v for k, v in changes.items() if v is not None and k in {f.name for f in fields(ExperimentConfig)}}
    me = {k[len("maxent_"):]: v for k, v in changes.items() if v is not None and k.startswith("maxent_")}
    hu = {k[len("human_"):]: v for k, v in changes.items() if v is not None and k.startswith("human_")}
    try:
        if me:
            top["maxent"] = replace(cfg.maxent, **me)
        if hu:
            top["human"] = replace(cfg.human, **hu)
        return replace(cfg, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_clusters(path: str | Path) -> list[ClusterProfile]:
    doc = yaml.safe_load(Path(path).read_text())
    threshold = float(doc.get("threshold", IMPULSE_THRESHOLD))
    out = []
    for c in doc["clusters"]:
        probs = {str(k): float(v) for k, v in c["p_purchase"].items()}
        bad = {k: v for k, v in probs.items() if not 0 <= v <= 1}
        if bad:
            raise ConfigError(f"cluster {c['id']}: probabilities outside [0, 1]: {bad}")
        out.append(ClusterProfile(int(c["id"]), probs, float(c.get("weight", 1.0)), threshold))
    return out


def get_cluster(path: str | Path, cluster_id: int) -> ClusterProfile:
    for c in load_clusters(path):
        if c.cluster_id == cluster_id:
            return c
    raise ConfigError(f"cluster {cluster_id} not found in {path}")
