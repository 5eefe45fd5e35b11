"""Experiment configuration: flat key-value files with sections, method-name
parsing, and dataset/graph construction.

Method names follow the table conventions: ``VFL`` (single aggregator),
``MACL`` (every device aggregates), ``4-MACL`` (four aggregators), optional
``CD-``/``PD-`` prefix for the dropout kind used in training, and an optional
``-G<n>`` suffix for gossip rounds, which only matters at evaluation time
(two methods differing only in the suffix share one checkpoint).
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .data import Dataset, load_idx, split_patches, synth_dataset
from .errors import ConfigError
from .faults import FAULT_KINDS, FaultModel
from .metrics import POLICIES
from .topology import GRAPH_KINDS, build_graph
from .training import TrainConfig

DATA_ROOT_ENV = "MAGS_DATA_ROOT"

_METHOD_RE = re.compile(r"^(?:(CD|PD)-)?(?:(\d+)-)?(MACL|VFL)(?:-G(\d+))?$")


@dataclass
class MethodSpec:
    name: str
    train_name: str
    aggregator_count: int
    dropout: str
    gossip_rounds: int


def parse_method(name: str, device_count: int) -> MethodSpec:
    m = _METHOD_RE.match(name.strip())
    if not m:
        raise ConfigError(f"unrecognized method name {name!r}")
    prefix, knum, core, gossip = m.groups()
    if core == "VFL":
        if knum is not None:
            raise ConfigError(f"{name!r}: VFL takes no aggregator-count prefix")
        k = 1
    else:
        k = int(knum) if knum is not None else device_count
    if not 1 <= k <= device_count:
        raise ConfigError(f"{name!r}: aggregator count {k} out of range 1..{device_count}")
    dropout = {"CD": "cd", "PD": "pd", None: "none"}[prefix]
    train_name = name.strip()
    if gossip is not None:
        train_name = train_name[: train_name.rfind("-G")]
    return MethodSpec(name.strip(), train_name, k, dropout,
                      int(gossip) if gossip is not None else 0)


def parse_seed_list(text: str):
    """Seeds as a comma/space list or an inclusive range like ``1..16``."""
    text = text.strip()
    rng = re.match(r"^(\d+)\.\.(\d+)$", text)
    if rng:
        lo, hi = int(rng.group(1)), int(rng.group(2))
        if hi < lo:
            raise ConfigError(f"bad seed range {text!r}")
        return list(range(lo, hi + 1))
    seeds = [int(tok) for tok in re.split(r"[,\s]+", text) if tok]
    if not seeds:
        raise ConfigError("seed list must be nonempty")
    return seeds


def _split_list(text: str):
    return [tok for tok in re.split(r"[,\s]+", text.strip()) if tok]


@dataclass
class ExperimentConfig:
    # dataset
    dataset_kind: str = "synthetic"
    grid_side: int = 4
    classes: int = 10
    synth_train_n: int = 8000
    synth_test_n: int = 2000
    synth_noise: float = 0.3
    synth_seed: int = 7
    idx_paths: dict = field(default_factory=dict)
    # graph
    graph_kind: str = "complete"
    rgg_radius: float | None = None
    random_aggregators: bool = False
    graph_seed: int = 0
    # methods
    methods: list = field(default_factory=lambda: ["VFL"])
    # training
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    dropout_rate: float = 0.3
    gossip_in_training: int = 0
    train_fault_kind: str = "none"
    train_fault_rate: float = 0.0
    # evaluation
    fault_kinds: list = field(default_factory=lambda: ["communication"])
    fault_rates: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    policies: list = field(default_factory=lambda: list(POLICIES))
    trials: int = 1
    # run
    seeds: list = field(default_factory=lambda: list(range(1, 17)))
    out_dir: Path = Path("runs")

    @property
    def device_count(self):
        return self.grid_side * self.grid_side

    def method_specs(self):
        return [parse_method(name, self.device_count) for name in self.methods]

    def train_variants(self):
        """Distinct training variants (gossip suffix stripped), input order kept."""
        seen, out = set(), []
        for spec in self.method_specs():
            if spec.train_name not in seen:
                seen.add(spec.train_name)
                out.append(parse_method(spec.train_name, self.device_count))
        return out

    def validate(self):
        if self.dataset_kind not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset kind {self.dataset_kind!r}")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigError(f"unknown graph kind {self.graph_kind!r}")
        if self.graph_kind == "rgg" and (self.rgg_radius is None or self.rgg_radius <= 0):
            raise ConfigError("rgg graphs need rgg_radius > 0")
        if not self.methods:
            raise ConfigError("method list must be nonempty")
        self.method_specs()
        if not self.policies:
            raise ConfigError("policy list must be nonempty")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}")
        for k in self.fault_kinds:
            if k not in FAULT_KINDS or k == "none":
                raise ConfigError(f"unknown eval fault kind {k!r}")
        for r in self.fault_rates:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"fault rate {r} outside [0, 1]")
        if not self.fault_rates:
            raise ConfigError("fault rate list must be nonempty")
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.train_fault_kind != "none":
            FaultModel(self.train_fault_kind, self.train_fault_rate).validate()
        if self.dataset_kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key not in self.idx_paths:
                    raise ConfigError(f"idx dataset needs the {key} path")
                if not self.idx_paths[key].exists():
                    raise ConfigError(f"dataset file not found: {self.idx_paths[key]}")
        return self


def resolve_data_path(raw: str, config_dir: Path) -> Path:
    """Dataset paths resolve against $MAGS_DATA_ROOT when set, else against
    the directory containing the config file."""
    p = Path(raw)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    return (Path(root) / p) if root else (config_dir / p)


def load_config(path, seeds_override=None, out_override=None) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as f:
            parser.read_file(f, source=str(path))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}")

    cfg = ExperimentConfig()

    def get(section, key, cast, default):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                return cast(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}")
        return default

    cfg.dataset_kind = get("dataset", "kind", str, cfg.dataset_kind).strip()
    cfg.grid_side = get("dataset", "grid", int, cfg.grid_side)
    cfg.classes = get("dataset", "classes", int, cfg.classes)
    cfg.synth_train_n = get("dataset", "train_n", int, cfg.synth_train_n)
    cfg.synth_test_n = get("dataset", "test_n", int, cfg.synth_test_n)
    cfg.synth_noise = get("dataset", "noise", float, cfg.synth_noise)
    cfg.synth_seed = get("dataset", "seed", int, cfg.synth_seed)
    if cfg.dataset_kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            raw = get("dataset", key, str, None)
            if raw is not None:
                cfg.idx_paths[key] = resolve_data_path(raw.strip(), path.parent)

    cfg.graph_kind = get("graph", "kind", str, cfg.graph_kind).strip()
    cfg.rgg_radius = get("graph", "rgg_radius", float, cfg.rgg_radius)
    cfg.random_aggregators = get("graph", "random_aggregators",
                                 lambda s: s.strip().lower() in ("1", "true", "yes"),
                                 cfg.random_aggregators)
    cfg.graph_seed = get("graph", "seed", int, cfg.graph_seed)
    devices = get("graph", "devices", int, None)
    if devices is not None and devices != cfg.device_count:
        raise ConfigError(
            f"[graph] devices = {devices} conflicts with grid side {cfg.grid_side} "
            f"({cfg.device_count} patch clients)")

    cfg.methods = get("methods", "list", _split_list, cfg.methods)

    cfg.epochs = get("train", "epochs", int, cfg.epochs)
    cfg.batch_size = get("train", "batch", int, cfg.batch_size)
    cfg.lr = get("train", "lr", float, cfg.lr)
    cfg.beta1 = get("train", "beta1", float, cfg.beta1)
    cfg.beta2 = get("train", "beta2", float, cfg.beta2)
    cfg.dropout_rate = get("train", "dropout_rate", float, cfg.dropout_rate)
    cfg.gossip_in_training = get("train", "gossip_in_training", int, cfg.gossip_in_training)
    cfg.train_fault_kind = get("train", "fault_kind", str, cfg.train_fault_kind).strip()
    cfg.train_fault_rate = get("train", "fault_rate", float, cfg.train_fault_rate)

    cfg.fault_kinds = get("eval", "fault_kinds", _split_list, cfg.fault_kinds)
    cfg.fault_rates = get("eval", "fault_rates",
                          lambda s: [float(t) for t in _split_list(s)], cfg.fault_rates)
    cfg.policies = get("eval", "policies", _split_list, cfg.policies)
    cfg.trials = get("eval", "trials", int, cfg.trials)

    cfg.seeds = get("run", "seeds", parse_seed_list, cfg.seeds)
    cfg.out_dir = Path(get("run", "out", str, str(cfg.out_dir)))

    if seeds_override:
        cfg.seeds = list(seeds_override)
    if out_override:
        cfg.out_dir = Path(out_override)
    return cfg.validate()


def build_dataset(cfg: ExperimentConfig):
    """Returns (train Dataset, test Dataset) for the configured source."""
    if cfg.dataset_kind == "synthetic":
        full = synth_dataset(cfg.synth_train_n + cfg.synth_test_n, cfg.classes,
                             cfg.grid_side, cfg.synth_seed, cfg.synth_noise)
        train = Dataset(full.features[:cfg.synth_train_n],
                        full.labels[:cfg.synth_train_n], full.class_count)
        test = Dataset(full.features[cfg.synth_train_n:],
                       full.labels[cfg.synth_train_n:], full.class_count)
        return train, test
    train = load_idx(cfg.idx_paths["train_images"], cfg.idx_paths["train_labels"],
                     class_count=cfg.classes)
    test = load_idx(cfg.idx_paths["test_images"], cfg.idx_paths["test_labels"],
                    class_count=cfg.classes)
    return train, test


def build_partition(cfg: ExperimentConfig, dataset: Dataset):
    return split_patches(dataset.feature_count, cfg.grid_side)


def build_method_graph(cfg: ExperimentConfig, spec: MethodSpec):
    return build_graph(cfg.graph_kind, cfg.device_count, spec.aggregator_count,
                       seed=cfg.graph_seed, rgg_radius=cfg.rgg_radius,
                       random_aggregators=cfg.random_aggregators)


def build_train_config(cfg: ExperimentConfig, spec: MethodSpec, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        beta1=cfg.beta1, beta2=cfg.beta2, dropout=spec.dropout,
        dropout_rate=cfg.dropout_rate,
        train_fault=FaultModel(cfg.train_fault_kind, cfg.train_fault_rate),
        gossip_rounds=cfg.gossip_in_training, seed=seed,
    ).validate()
