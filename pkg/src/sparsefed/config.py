"""Experiment configuration: JSON schema, validation, defaults.

An empty config file is valid and resolves to the default federated setup
(100 clients, 10 participants per round, 5 local epochs, batch 128, lr 0.1
decayed by 0.998 per round, weight decay 5e-4, density 0.5, initial prune
rate 0.5) on a small synthetic task.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .errors import ConfigurationError

STRATEGIES = ("dst_gradient", "dst_random", "rsm", "fedavg", "local", "subsampling")
MASK_INITS = ("same_seed", "per_client_seed")


@dataclass(frozen=True)
class DatasetConfig:
    type: str = "synthetic"   # "synthetic" | "idx"
    # synthetic
    num_classes: int = 10
    dim: int = 20
    per_class: int = 400
    test_per_class: int = 100
    spread: float = 1.0
    data_seed: int = 0
    # idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class PartitionConfig:
    type: str = "iid"         # "iid" | "dirichlet"
    gamma: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    clients: int = 100
    participants: int = 10
    rounds: int = 100
    local_epochs: float = 5.0
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.998
    weight_decay: float = 0.0005
    density: float = 0.5
    alpha0: float = 0.5
    erk_scale: float = 1.0
    strategy: str = "dst_gradient"
    mask_init: str = "same_seed"
    upload_density: float = 0.5   # subsampling baseline only
    hidden: tuple[int, ...] = (64, 32)
    test_per_client: int = 100
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/out"

    def validate(self):
        if not 1 <= self.participants <= self.clients:
            raise ConfigurationError(
                f"participants ({self.participants}) must be in [1, clients ({self.clients})]")
        if not 0.0 < self.density <= 1.0:
            raise ConfigurationError(f"density must be in (0, 1], got {self.density}")
        if not 0.0 <= self.alpha0 < 1.0:
            raise ConfigurationError(f"alpha0 must be in [0, 1), got {self.alpha0}")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")
        if self.batch_size < 1 or self.local_epochs <= 0:
            raise ConfigurationError("batch_size and local_epochs must be positive")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ConfigurationError("lr and lr_decay must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.mask_init not in MASK_INITS:
            raise ConfigurationError(f"mask_init must be one of {MASK_INITS}")
        if not 0.0 < self.upload_density <= 1.0:
            raise ConfigurationError("upload_density must be in (0, 1]")
        if self.partition.type not in ("iid", "dirichlet"):
            raise ConfigurationError("partition.type must be 'iid' or 'dirichlet'")
        if self.partition.type == "dirichlet" and self.partition.gamma <= 0:
            raise ConfigurationError("partition.gamma must be positive")
        if self.dataset.type not in ("synthetic", "idx"):
            raise ConfigurationError("dataset.type must be 'synthetic' or 'idx'")
        if not self.seeds:
            raise ConfigurationError("at least one seed required")
        return self


def _from_dict(cls, data: dict, where: str):
    fields = {f: t for f, t in cls.__dataclass_fields__.items()}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return data


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(_from_dict(ExperimentConfig, data, "config"))
    if "dataset" in data:
        data["dataset"] = DatasetConfig(**_from_dict(DatasetConfig, data["dataset"], "dataset"))
    if "partition" in data:
        data["partition"] = PartitionConfig(
            **_from_dict(PartitionConfig, data["partition"], "partition"))
    if "hidden" in data:
        data["hidden"] = tuple(data["hidden"])
    if "seeds" in data:
        data["seeds"] = tuple(data["seeds"])
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    d["seeds"] = list(cfg.seeds)
    return d


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read().strip()
    if not text:
        return ExperimentConfig().validate()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top-level JSON must be an object")
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
