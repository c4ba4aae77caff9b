"""Experiment configuration: YAML documents validated against a strict schema."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import AllToAll, AllToOne
from .models import TrainConfig

SWEEP_AXES = {
    "target_class": ("attack", "label_rule", "target"),
    "poisoning_rate": ("attack", "poisoning_rate"),
    "k": ("attack", "k"),
    "eps": ("attack", "eps"),
    "K": ("attack", "mask_update_period"),
    "alpha": ("attack", "step_size"),
    "T": ("attack", "iterations"),
    "data_fraction": ("surrogate", "data_fraction"),
}
DEFENSES = ("strip", "scale_up", "fine_prune", "neural_cleanse")
ATTACKS = ("siba", "sparse", "random", "badnets", "blended")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists ``(key path, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(f"  {k}: {m}" for k, m in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticData(_Strict):
    num_classes: int = Field(10, ge=2)
    train_per_class: int = Field(200, ge=1)
    test_per_class: int = Field(50, ge=1)
    height: int = Field(16, ge=4)
    width: int = Field(16, ge=4)
    channels: int = Field(3, ge=1)
    noise: float = Field(0.12, ge=0)


class DataSection(_Strict):
    dataset: Literal["cifar10", "imagefolder", "synthetic"] = "cifar10"
    root: str | None = None
    train_limit: int | None = Field(None, ge=1)
    test_limit: int | None = Field(None, ge=1)
    synthetic: SyntheticData = SyntheticData()


class TrainSection(_Strict):
    architecture: Literal["small-resnet", "small-vgg", "small-cnn"] = "small-resnet"
    epochs: int = Field(100, ge=0)
    lr: float = Field(0.1, gt=0)
    milestones: list[int] = [60, 90]
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: int = Field(128, ge=1)
    random_crop: bool = True
    horizontal_flip: bool = True
    data_fraction: float = Field(1.0, gt=0, le=1)

    @model_validator(mode="after")
    def _milestones(self):
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.epochs and ms and ms[-1] >= self.epochs:
            raise ValueError("milestones must be smaller than epochs")
        return self

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.architecture, self.epochs, self.lr, tuple(self.milestones), self.momentum,
                           self.weight_decay, self.batch_size, self.random_crop, self.horizontal_flip, seed)


class LabelRuleSection(_Strict):
    kind: Literal["all_to_one", "all_to_all"] = "all_to_one"
    target: int = Field(0, ge=0)
    shift: int = 1

    def build(self):
        return AllToOne(self.target) if self.kind == "all_to_one" else AllToAll(self.shift)


class AttackSection(_Strict):
    method: Literal["siba", "sparse", "random", "badnets", "blended"] = "siba"
    label_rule: LabelRuleSection = LabelRuleSection()
    poisoning_rate: float = Field(0.01, gt=0, le=1)
    k: int = Field(100, ge=1)
    eps: float = Field(8 / 255, gt=0, le=1)
    step_size: float = Field(0.2, gt=0)
    iterations: int = Field(200, ge=0)
    mask_update_period: int = Field(5, ge=1)
    batch_size: int = Field(128, ge=1)
    spatial_grouping: bool = False
    patch_size: int = Field(3, ge=1)
    patch_style: Literal["checkerboard", "white"] = "checkerboard"
    blend_transparency: float = Field(0.2, ge=0, le=1)


class EvaluationSection(_Strict):
    clean_baseline: bool = True
    eps_test: list[float] = []
    ssim_samples: int | None = Field(None, ge=1)


class StripSection(_Strict):
    n_samples: int = Field(200, ge=1)
    n_overlays: int = Field(64, ge=1)
    blend: float = Field(0.5, gt=0, lt=1)


class ScaleUpSection(_Strict):
    n_samples: int = Field(500, ge=1)
    scales: list[float] = [2.0, 3.0, 4.0, 5.0, 6.0]
    threshold: float = Field(0.8, ge=0, le=1)


class FinePruneSection(_Strict):
    validation_fraction: float = Field(0.2, gt=0, le=1)
    steps: list[int] | None = None


class NeuralCleanseSection(_Strict):
    lr: float = Field(0.1, gt=0)
    reg_coef: float = Field(1e-3, ge=0)
    epochs: int = Field(50, ge=1)
    probe_size: int = Field(1000, ge=2)
    batch_size: int = Field(128, ge=1)


class DefenseSection(_Strict):
    enabled: list[Literal["strip", "scale_up", "fine_prune", "neural_cleanse"]] = []
    strip: StripSection = StripSection()
    scale_up: ScaleUpSection = ScaleUpSection()
    fine_prune: FinePruneSection = FinePruneSection()
    neural_cleanse: NeuralCleanseSection = NeuralCleanseSection()


class SeedSection(_Strict):
    surrogate: int | None = None
    synthesis: int | None = None
    poison: int | None = None
    victim: int | None = None
    defense: int | None = None


class TransferSection(_Strict):
    architectures: list[Literal["small-resnet", "small-vgg", "small-cnn"]] = Field(min_length=2)


class ExperimentConfig(_Strict):
    experiment_id: str = "experiment"
    seed: int = 0
    device: str = "cpu"
    data: DataSection = DataSection()
    surrogate: TrainSection = TrainSection()
    victim: TrainSection = TrainSection()
    attack: AttackSection = AttackSection()
    evaluation: EvaluationSection = EvaluationSection()
    defenses: DefenseSection = DefenseSection()
    seeds: SeedSection = SeedSection()
    sweep: dict[str, list[Any]] | None = None
    transfer: TransferSection | None = None

    @model_validator(mode="after")
    def _sweep(self):
        if self.sweep is not None:
            unknown = [a for a in self.sweep if a not in SWEEP_AXES]
            if unknown:
                raise ValueError(f"unknown sweep axis {unknown}; choose from {sorted(SWEEP_AXES)}")
            if len(self.sweep) != 1:
                raise ValueError(f"sweep must declare exactly one axis, got {sorted(self.sweep)}")
            if not next(iter(self.sweep.values())):
                raise ValueError("sweep axis has no values")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Copy with every stage seed made explicit."""
        offsets = {"surrogate": 0, "synthesis": 1, "poison": 2, "victim": 3, "defense": 4}
        seeds = {k: (v if v is not None else self.seed * 10 + offsets[k])
                 for k, v in self.seeds.model_dump().items()}
        return self.model_copy(update={"seeds": SeedSection(**seeds)})

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def with_override(self, dotted: tuple[str, ...], value) -> "ExperimentConfig":
        data = self.to_dict()
        node = data
        for key in dotted[:-1]:
            node = node[key]
        node[dotted[-1]] = value
        data["sweep"] = None
        return validate_config(data)


def _format_errors(err: ValidationError) -> list[tuple[str, str]]:
    out = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append((path, e["msg"]))
    return out


def validate_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def shipped_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("siba.configs").iterdir() if p.name.endswith(".yaml"))


def load_config(path_or_name) -> ExperimentConfig:
    """Load a YAML config from a path, or by the name of a shipped config."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text()
    else:
        ref = resources.files("siba.configs") / f"{path_or_name}.yaml"
        if not ref.is_file():
            raise ConfigError([("<file>", f"no config file {path_or_name!r} and no shipped config "
                                          f"by that name (shipped: {', '.join(shipped_configs())})")])
        text = ref.read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"YAML parse error: {exc}")]) from None
    return validate_config(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def content_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
