"""Run configuration files.

TOML, versioned, with every field optional: missing keys fall back to the
defaults documented in ``default_config_toml``. Unknown keys are errors so
typos cannot silently change an experiment.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Optional

import tomli

from .datasets import ReidSpec, SourceSpec
from .scenarios import ConfigError, ScenarioConfig
from .strategies import PruneSchedule

__all__ = ["load_config", "config_from_dict", "default_config_toml", "ConfigError"]

CONFIG_VERSION = 1


def _take(section: dict, allowed: dict, where: str) -> dict:
    out = {}
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{where}] "
                              f"(allowed: {sorted(allowed)})")
        out[key] = value
    return out


def _dataclass_section(cls, section: dict, where: str):
    allowed = {f.name: f for f in fields(cls)}
    values = _take(section, allowed, where)
    if "image_shape" in values:
        values["image_shape"] = tuple(values["image_shape"])
    return cls(**values)


def config_from_dict(doc: dict) -> ScenarioConfig:
    doc = dict(doc)
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version} (this build reads "
                          f"version {CONFIG_VERSION})")
    cfg = ScenarioConfig()

    top = _take(doc, {"seed": None, "model": None, "dataset": None, "criterion": None,
                      "strategy": None, "schedule": None, "trainer": None,
                      "scenario": None, "policy": None, "eval": None}, "top level")
    if "seed" in top:
        cfg.seed = int(top["seed"])
    if "model" in top:
        model = _take(top["model"], {"arch": None}, "model")
        cfg.arch = model.get("arch", cfg.arch)
    if "dataset" in top:
        ds = _take(top["dataset"], {"source": None, "target": None}, "dataset")
        if "source" in ds:
            cfg.source = _dataclass_section(SourceSpec, ds["source"], "dataset.source")
        if "target" in ds:
            cfg.target = _dataclass_section(ReidSpec, ds["target"], "dataset.target")
    if "criterion" in top:
        section = dict(top["criterion"])
        cfg.criterion = section.pop("name", cfg.criterion)
        cfg.criterion_params = section
    if "strategy" in top:
        section = dict(top["strategy"])
        cfg.strategy = section.pop("name", cfg.strategy)
        cfg.strategy_params = section
    if "schedule" in top:
        cfg.schedule = _dataclass_section(PruneSchedule, top["schedule"], "schedule")
    if "trainer" in top:
        tr = _take(top["trainer"], {"lr": None, "momentum": None, "weight_decay": None,
                                    "batch_size": None, "margin": None, "pk_p": None,
                                    "pk_k": None}, "trainer")
        for key, value in tr.items():
            setattr(cfg, key, value)
    if "scenario" in top:
        sc = _take(top["scenario"], {"kind": None, "pretrain_epochs": None,
                                     "finetune_epochs": None,
                                     "second_target_compression": None}, "scenario")
        cfg.scenario = int(sc.get("kind", cfg.scenario))
        cfg.pretrain_epochs = int(sc.get("pretrain_epochs", cfg.pretrain_epochs))
        cfg.finetune_epochs = int(sc.get("finetune_epochs", cfg.finetune_epochs))
        if "second_target_compression" in sc:
            cfg.second_target_compression = float(sc["second_target_compression"])
    if "policy" in top:
        pol = _take(top["policy"], {"threshold_n": None, "threshold_c": None}, "policy")
        cfg.threshold_n = float(pol.get("threshold_n", cfg.threshold_n))
        cfg.threshold_c = float(pol.get("threshold_c", cfg.threshold_c))
    if "eval" in top:
        ev = _take(top["eval"], {"max_rank": None, "probe_size": None}, "eval")
        cfg.max_rank = int(ev.get("max_rank", cfg.max_rank))
        cfg.probe_size = int(ev.get("probe_size", cfg.probe_size))
    return cfg.validate()


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}")
    return config_from_dict(doc)


def default_config_toml() -> str:
    """The documented default configuration (protocol defaults pre-filled)."""
    return """\
# prunekit run configuration, version 1
version = 1
seed = 7

[model]
arch = "toy"            # toy | toy_small | resnet18 | resnet34 | resnet50 | path to TOML

[dataset.source]        # classification pre-training data
classes = 24
samples_per_class = 24
prototype_dim = 6
noise = 0.25
seed = 0
world_seed = 1234

[dataset.target]        # cross-camera re-identification data
identities = 64
test_identities = 16
cameras = 2
samples_per_identity_per_camera = 4
prototype_dim = 6
camera_strength = 0.2
noise = 0.1
seed = 0
world_seed = 1234

[criterion]
name = "l1"             # l1 | l2 | fpgm | entropy | taylor | nisp | redundancy | thinet | lasso
# extra keys become criterion parameters, e.g. bins = 32 for entropy

[strategy]
name = "iterative"      # one_step | iterative | autobalanced | play_and_prune | psfp
# extra keys become strategy parameters, e.g. alpha = 1e-4 for autobalanced

[schedule]              # the default pruning protocol
fraction_per_iteration = 0.05
ranking_epochs = 1
retrain_epochs = 4
target_compression = 0.5
scope = "per_layer"     # per_layer | global

[trainer]
lr = 0.05
momentum = 0.9
weight_decay = 5e-4
batch_size = 32
margin = 0.5
pk_p = 8
pk_k = 4

[scenario]
kind = 1                # 1..4 (4 rejects the psfp strategy)
pretrain_epochs = 15
finetune_epochs = 25
# second_target_compression = 0.25   # scenario 2's target-stage compression

[policy]                # fine-tune freezing decision
threshold_n = 20
threshold_c = 0.1

[eval]
max_rank = 10
probe_size = 256
"""
