"""Run configuration: a sectioned key/value (INI) file.

Example::

    [data]
    train_images = data/mnist5k-train-images-idx3-ubyte.gz
    train_labels = data/mnist5k-train-labels-idx1-ubyte.gz
    test_images = data/mnist5k-t10k-images-idx3-ubyte.gz
    test_labels = data/mnist5k-t10k-labels-idx1-ubyte.gz
    superclass_map = maps/mnist_2way.tsv

    [architecture]
    layers = conv:8:5, relu, pool:2, conv:16:5, relu, pool:2, flatten, fc:64, relu, fc:10
    expert_head_width = 64
    mediator_head_width = 64
    shared_layers = 0
    confidence_layer = auto

    [training]
    epochs = 8

    [gating]
    threshold = 4
    mediator_weight = 0.6

    [run]
    seed = 0
    out = runs/default

Relative paths resolve against the config file's directory. Setting
``synthetic = N_CLASSES:N_PER_CLASS:SIZE`` under ``[data]`` replaces the IDX
files with generated bar patterns.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from .builder import DEFAULT_LAYERS, ConfigError, EnsembleConfig
from .data import load_idx, synth_dataset, train_test_split
from .gating import GatingConfig
from .nn import parse_layers
from .partition import SuperclassMap, load_superclass_map
from .training import TrainConfig

_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    path: Optional[Path]
    data: dict
    architecture: EnsembleConfig
    training: TrainConfig
    gating: GatingConfig
    seed: int
    out: Path
    superclass_map: Optional[Path]

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, training=replace(self.training, seed=seed))

    def partition(self, n_classes: Optional[int] = None) -> SuperclassMap:
        if self.superclass_map is None:
            raise ConfigError("config has no superclass_map")
        return load_superclass_map(self.superclass_map, n_classes)

    def datasets(self) -> tuple:
        """(train, test) datasets."""
        synth = self.data.get("synthetic")
        if synth:
            n_classes, per_class, size = (int(v) for v in synth.split(":"))
            ds = synth_dataset(self.seed, n_classes, per_class, size)
            return train_test_split(ds, 0.25, self.seed)
        train = load_idx(self.data["train_images"], self.data["train_labels"])
        test = load_idx(self.data["test_images"], self.data["test_labels"])
        return train, test


def _resolve(base: Path, value: str) -> Path:
    p = Path(value).expanduser()
    return p if p.is_absolute() else base / p


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path, encoding="utf-8")
    return parse_config(parser, path.parent, path)


def parse_config(parser: configparser.ConfigParser, base: Path, path: Optional[Path] = None) -> RunConfig:
    try:
        return _parse(parser, base, path)
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _parse(parser, base, path) -> RunConfig:
    section = lambda name: parser[name] if parser.has_section(name) else {}
    data_sec, arch_sec = section("data"), section("architecture")
    train_sec, gate_sec, run_sec = section("training"), section("gating"), section("run")

    data = {}
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if key in data_sec:
            data[key] = _resolve(base, data_sec[key])
    if data_sec.get("synthetic"):
        data["synthetic"] = data_sec["synthetic"]
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in data:
                raise ConfigError(f"[data] {key} is required unless synthetic is set")
            if not data[key].is_file():
                raise ConfigError(f"[data] {key}: file not found: {data[key]}")
    smap = _resolve(base, data_sec["superclass_map"]) if "superclass_map" in data_sec else None
    if smap is not None and not smap.is_file():
        raise ConfigError(f"[data] superclass_map: file not found: {smap}")

    seed = int(run_sec.get("seed", 0))
    conf_layer = arch_sec.get("confidence_layer", "auto")
    layers = parse_layers(arch_sec.get("layers", DEFAULT_LAYERS))
    size = data_sec.get("synthetic")
    default_shape = "1,28,28" if not size else f"1,{size.split(':')[2]},{size.split(':')[2]}"
    n_experts = int(arch_sec.get("n_experts", 0)) or (
        load_superclass_map(smap).n_superclasses if smap is not None else 2)
    arch = EnsembleConfig(
        tuple(layers),
        input_shape=tuple(int(v) for v in arch_sec.get("input_shape", default_shape).split(",")),
        n_experts=n_experts,
        shared_layers=int(arch_sec.get("shared_layers", 0)),
        confidence_layer=None if conf_layer == "auto" else int(conf_layer),
        expert_head_width=int(arch_sec.get("expert_head_width", 64)),
        mediator_head_width=int(arch_sec.get("mediator_head_width", 64)),
        expert_init=arch_sec.get("expert_init", "mediator"),
    )
    kw = {}
    for key, value in train_sec.items():
        if key not in _TRAIN_FIELDS:
            raise ConfigError(f"[training] unknown key {key!r}")
        kw[key] = float(value) if _TRAIN_FIELDS[key] in (float, "float") else int(value)
    kw["seed"] = seed
    training = TrainConfig(**kw)
    gating = GatingConfig(float(gate_sec.get("threshold", 4.0)), float(gate_sec.get("mediator_weight", 0.6)))
    out = _resolve(base, run_sec.get("out", "runs/default"))
    return RunConfig(path, data, arch, training, gating, seed, out, smap)
