"""Experiment configuration: YAML document -> validated :class:`ExperimentConfig`.

See the README for the full grammar. Unknown keys are rejected so that typos
fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .data import LabeledDataset, load_csv, standardize, synth_gaussian
from .errors import InvalidArgument
from .layout import TaskLayout
from .model import HEAD_INITS
from .sampler import BatchPlan
from .trainer import Method, TrainConfig

OUTPUT_ENV = "SSIL_OUTPUT_DIR"

_DATASET_KEYS = {"kind", "num_classes", "dim", "per_class", "spread", "separation", "seed",
                 "standardize", "train", "test", "header"}
_TRAIN_KEYS = {"epochs", "base_lr", "lr_drop_epochs", "lr_drop_factor", "momentum", "nesterov",
               "weight_decay", "tau", "new_batch_size", "replay_batch_size", "joint_batch_size",
               "post_process", "bft_epochs", "bft_head_only", "score_reserve_fraction",
               "score_iterations"}
_TOP_KEYS = {"dataset", "layout", "memory", "model", "train", "methods", "seeds", "ks", "output_dir"}


class ConfigError(InvalidArgument):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    layout: TaskLayout
    capacity: int
    hidden: tuple
    head_init: str
    train: TrainConfig
    methods: tuple
    seeds: tuple
    ks: tuple = (1, 2)
    output_dir: str = "out"
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def layer_dims(self) -> tuple:
        return (int(self.dataset["dim"]),) + tuple(self.hidden)

    def train_config(self, method: Method, seed: int) -> TrainConfig:
        return replace(self.train, method=method, seed=seed)

    def to_dict(self) -> dict:
        t = self.train
        return {
            "dataset": dict(self.dataset),
            "layout": {"tasks": self.layout.total_tasks,
                       "classes_per_task": self.layout.classes_per_task},
            "memory": self.capacity,
            "model": {"hidden": list(self.hidden), "head_init": self.head_init},
            "train": {
                "epochs": t.epochs, "base_lr": t.base_lr, "lr_drop_epochs": list(t.lr_drop_epochs),
                "lr_drop_factor": t.lr_drop_factor, "momentum": t.momentum, "nesterov": t.nesterov,
                "weight_decay": t.weight_decay, "tau": t.tau,
                "new_batch_size": t.batch_plan.new_batch_size,
                "replay_batch_size": t.batch_plan.replay_batch_size,
                "joint_batch_size": t.joint_batch_size, "post_process": t.post_process,
                "bft_epochs": t.bft_epochs, "bft_head_only": t.bft_head_only,
                "score_reserve_fraction": t.score_reserve_fraction,
                "score_iterations": t.score_iterations,
            },
            "methods": [m.value for m in self.methods],
            "seeds": list(self.seeds),
            "ks": list(self.ks),
            "output_dir": self.output_dir,
        }


def _section(doc: dict, key: str, allowed: set) -> dict:
    sec = doc.get(key) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be a mapping")
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"unknown keys in '{key}': {sorted(extra)}")
    return sec


def _int(v, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{what} must be an integer, got {v!r}")
    return v


def parse_config(doc, base_dir=".") -> ExperimentConfig:
    """Validate a parsed YAML mapping. Raises :class:`ConfigError`."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")

    ds = {"kind": "synthetic", "num_classes": 10, "dim": 16, "per_class": 200, "spread": 1.0,
          "separation": 4.0, "seed": 42, "standardize": False, "header": False}
    ds.update(_section(doc, "dataset", _DATASET_KEYS))
    if ds["kind"] not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {ds['kind']!r}")
    if ds["kind"] == "csv":
        for k in ("train", "test"):
            if not isinstance(ds.get(k), str):
                raise ConfigError(f"csv datasets need a dataset.{k} path")
        for k in ("num_classes", "dim"):
            _int(ds[k], f"dataset.{k}")
    else:
        for k in ("num_classes", "dim", "per_class", "seed"):
            _int(ds[k], f"dataset.{k}")
        for k in ("spread", "separation"):
            try:
                ds[k] = float(ds[k])
            except (TypeError, ValueError):
                raise ConfigError(f"dataset.{k} must be a number") from None
            if not ds[k] > 0:
                raise ConfigError(f"dataset.{k} must be positive")
        if min(ds["num_classes"], ds["dim"], ds["per_class"]) < 1:
            raise ConfigError("dataset counts must be >= 1")

    lay = _section(doc, "layout", {"tasks", "classes_per_task"})
    try:
        layout = TaskLayout(_int(lay.get("tasks", 5), "layout.tasks"),
                            _int(lay.get("classes_per_task", 2), "layout.classes_per_task"))
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None
    if layout.num_classes != ds["num_classes"]:
        raise ConfigError(f"layout covers {layout.num_classes} classes but the dataset has "
                          f"{ds['num_classes']}")

    capacity = _int(doc.get("memory", 50), "memory")
    if capacity // layout.num_classes < 1:
        raise ConfigError(f"memory {capacity} cannot hold one exemplar per class for "
                          f"{layout.num_classes} classes")

    mdl = _section(doc, "model", {"hidden", "head_init"})
    hidden = mdl.get("hidden", [64, 32])
    if not isinstance(hidden, list) or not hidden:
        raise ConfigError("model.hidden must be a non-empty list")
    hidden = tuple(_int(h, "model.hidden entry") for h in hidden)
    if min(hidden) < 1:
        raise ConfigError("model.hidden entries must be >= 1")
    head_init = mdl.get("head_init", "uniform")
    if head_init not in HEAD_INITS:
        raise ConfigError(f"model.head_init must be one of {HEAD_INITS}")

    tr = dict(_section(doc, "train", _TRAIN_KEYS))
    plan_args = (tr.pop("new_batch_size", 32), tr.pop("replay_batch_size", 8))
    for k in ("base_lr", "lr_drop_factor", "momentum", "weight_decay", "tau",
              "score_reserve_fraction"):
        if k in tr:
            # PyYAML reads "1e-4" (no dot) as a string.
            try:
                tr[k] = float(tr[k])
            except (TypeError, ValueError):
                raise ConfigError(f"train.{k} must be a number, got {tr[k]!r}") from None
    try:
        plan = BatchPlan(*(_int(v, "batch size") for v in plan_args))
        if "lr_drop_epochs" in tr:
            tr["lr_drop_epochs"] = tuple(tr["lr_drop_epochs"])
        train = TrainConfig(batch_plan=plan, **tr)
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from None

    methods = doc.get("methods", ["FT", "SSIL"])
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list")
    try:
        methods = tuple(Method(m) for m in methods)
    except ValueError:
        raise ConfigError(f"methods must be drawn from {[m.value for m in Method]}") from None
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a non-empty list")
    seeds = tuple(_int(s, "seed") for s in seeds)
    ks = doc.get("ks", [1, 2])
    if not isinstance(ks, list) or not ks:
        raise ConfigError("ks must be a non-empty list")
    ks = tuple(sorted({_int(k, "k") for k in ks}))
    if ks[0] < 1:
        raise ConfigError("ks must be >= 1")
    out = doc.get("output_dir", "out")
    if not isinstance(out, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentConfig(ds, layout, capacity, hidden, head_init, train, methods, seeds,
                            ks, out, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return parse_config(doc, base_dir=path.parent)


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Train and test splits described by the config's dataset section."""
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        train, test = synth_gaussian(ds["num_classes"], ds["dim"], ds["per_class"],
                                     float(ds["spread"]), ds["seed"], float(ds["separation"]))
    else:
        train = load_csv(cfg.base_dir / ds["train"], ds["header"], ds["num_classes"])
        test = load_csv(cfg.base_dir / ds["test"], ds["header"], ds["num_classes"])
        for name, d in (("train", train), ("test", test)):
            if d.dim != ds["dim"]:
                raise ConfigError(f"{name} csv has {d.dim} features, config says {ds['dim']}")
            if np.any(d.class_counts() == 0):
                raise ConfigError(f"{name} csv is missing some of the {ds['num_classes']} classes")
    if ds["standardize"]:
        train, test = standardize(train, test)
    return train, test

