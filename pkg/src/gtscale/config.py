"""Run configuration documents for the command line tools.

A run config is a YAML (or JSON) mapping with the sections ``data``, ``train``,
``bench`` and a top level ``output`` directory. Unknown keys are rejected at
every level. ``docs/config.md`` lists every key.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .train import TrainConfig

SEED_ENV = "GT_SEED"


def _strict(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class SbmSpec:
    n: int = 80
    blocks: int = 2
    p_in: float = 0.95
    p_out: float = 0.3
    seed: int = 0
    noise: float = 0.1


@dataclass
class GraphItem:
    edges: str = ""
    label: int = 0
    features: str | None = None
    num_nodes: int | None = None


@dataclass
class DataConfig:
    edges: str | None = None
    features: str | None = None
    labels: str | None = None
    num_nodes: int | None = None
    undirected: bool = False
    num_classes: int | None = None
    sbm: SbmSpec | None = None
    graphs: list[GraphItem] | None = None

    @classmethod
    def from_dict(cls, data) -> "DataConfig":
        cfg = _strict(cls, data, "data")
        if isinstance(cfg.sbm, dict):
            cfg.sbm = _strict(SbmSpec, cfg.sbm, "data.sbm")
        if cfg.graphs is not None:
            if not isinstance(cfg.graphs, list):
                raise ConfigError("data.graphs: expected a list")
            cfg.graphs = [g if isinstance(g, GraphItem) else _strict(GraphItem, g, f"data.graphs[{i}]")
                          for i, g in enumerate(cfg.graphs)]
        sources = sum(x is not None for x in (cfg.edges, cfg.sbm, cfg.graphs))
        if sources > 1:
            raise ConfigError("data: give only one of edges, sbm, graphs")
        return cfg

    def paths(self) -> list[str]:
        out = [p for p in (self.edges, self.features, self.labels) if p is not None]
        for g in self.graphs or []:
            out += [p for p in (g.edges, g.features) if p]
        return out


@dataclass
class BenchConfig:
    seq_lens: list[int] = field(default_factory=lambda: [64, 128])
    hidden: list[int] = field(default_factory=lambda: [16])
    patterns: list[str] = field(default_factory=lambda: ["dense", "edge", "cluster"])
    density: float = 0.1
    d_b: list[int] = field(default_factory=lambda: [4])
    k: int = 4
    beta_thre: float | None = None
    repeats: int = 3
    seed: int = 0

    @classmethod
    def from_dict(cls, data) -> "BenchConfig":
        cfg = _strict(cls, data, "bench")
        for name in ("seq_lens", "hidden", "patterns", "d_b"):
            if not isinstance(getattr(cfg, name), list):
                raise ConfigError(f"bench.{name}: expected a list")
        bad = sorted(set(cfg.patterns) - {"dense", "edge", "cluster"})
        if bad:
            raise ConfigError(f"bench.patterns: unknown patterns {bad}")
        if cfg.repeats < 1:
            raise ConfigError("bench.repeats must be >= 1")
        return cfg


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    output: str = "run"

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        unknown = sorted(set(doc) - {"data", "train", "bench", "output"})
        if unknown:
            raise ConfigError(f"unknown keys {unknown}")
        train = doc.get("train") or {}
        if not isinstance(train, dict):
            raise ConfigError("train: expected a mapping")
        return cls(DataConfig.from_dict(doc.get("data")), TrainConfig.from_dict(train),
                   BenchConfig.from_dict(doc.get("bench")), str(doc.get("output", "run")))

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        return cls.from_dict(doc)

    def check_paths(self) -> None:
        for p in self.data.paths():
            if not Path(p).is_file():
                raise FileNotFoundError(p)


def _coerce(text: str):
    """Parse the right hand side of ``--set`` with YAML scalar rules."""
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError:
        return text
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" (no dot) as a string
        try:
            return float(value)
        except ValueError:
            pass
    return value


def apply_overrides(doc: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` assignments to a raw config mapping."""
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} walks into a non-mapping")
        node[parts[-1]] = _coerce(value)
    return doc


def load_run_config(path: str | os.PathLike | None, overrides: list[str] = (),
                    env: dict | None = None) -> RunConfig:
    """Read a config file, then apply the ``GT_SEED`` variable, then ``--set`` flags."""
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc.setdefault("train", {})["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return RunConfig.from_dict(apply_overrides(doc, list(overrides)))
