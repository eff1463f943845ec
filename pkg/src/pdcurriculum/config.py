"""Experiment configuration: one JSON document, one section per module.

Every seed is derived from the top-level ``seed`` so that ``--seed`` moves the
whole experiment at once:

* synthetic cohort and split: ``seed``
* OOD cohort *i* (0-based): ``seed + 7919 * (i + 1)``
* pretraining cohort and run: ``seed + 104729``
* training run *k*: ``seed + k``
* hyperparameter search sampling: ``seed``
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .curriculum import BalanceMode, CurriculumKind
from .data_model import SplitSpec
from .interpretation import OcclusionConfig
from .model import BackboneConfig, Variant
from .synthetic import OOD_SEED_STRIDE, SyntheticConfig
from .training import TrainConfig

PRETRAIN_SEED_OFFSET = 104729


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OODSpec:
    name: str
    offset: float = 1.0
    n_controls: int | None = None
    n_per_stage: tuple[int, int, int, int] | None = None


@dataclass(frozen=True)
class PretrainSpec:
    n_subjects: int = 200
    val_fraction: float = 0.2
    epochs: int = 10


@dataclass(frozen=True)
class SearchSpec:
    n_trials: int = 4
    budget_epochs: int = 2


@dataclass(frozen=True)
class BackboneSpec:
    """Preset name plus optional architecture overrides; input_shape follows the synthetic shape."""

    variant: Variant = Variant.TINY_DENSENET_3D
    init_features: int | None = None
    growth_rate: int | None = None
    block_layers: tuple[int, int, int, int] | None = None
    bn_size: int | None = None
    compression: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.block_layers is not None:
            object.__setattr__(self, "block_layers", tuple(self.block_layers))

    def build(self, input_shape) -> BackboneConfig:
        base = BackboneConfig.preset(self.variant, input_shape)
        overrides = {f.name: getattr(self, f.name) for f in fields(self)
                     if f.name != "variant" and getattr(self, f.name) is not None}
        return replace(base, **overrides)


@dataclass(frozen=True)
class StrategySpec:
    kind: CurriculumKind = CurriculumKind.CURRICULUM
    balance: BalanceMode = BalanceMode.OFF
    pretrained: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", CurriculumKind(self.kind))
        object.__setattr__(self, "balance", BalanceMode(self.balance))

    @property
    def label(self) -> str:
        parts = [self.kind.value]
        if self.balance is BalanceMode.BALANCED:
            parts.append("balanced")
        if self.pretrained:
            parts.append("pretrained")
        return "_".join(parts)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_runs: int = 3
    output_dir: str = "experiment"
    backbone_spec: BackboneSpec = field(default_factory=BackboneSpec)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    search: SearchSpec = field(default_factory=SearchSpec)
    ood: tuple[OODSpec, ...] = ()
    strategies: tuple[StrategySpec, ...] = ()

    @property
    def backbone(self) -> BackboneConfig:
        return self.backbone_spec.build(self.synthetic.shape)

    @property
    def strategy_grid(self) -> tuple[StrategySpec, ...]:
        if self.strategies:
            return self.strategies
        return (StrategySpec(self.train.kind, self.train.balance),)

    def synthetic_for_ood(self, index: int) -> SyntheticConfig:
        spec = self.ood[index]
        cfg = replace(self.synthetic, seed=self.seed + OOD_SEED_STRIDE * (index + 1),
                      site_offset=spec.offset, site=spec.name, id_prefix=spec.name)
        if spec.n_controls is not None:
            cfg = replace(cfg, n_controls=spec.n_controls)
        if spec.n_per_stage is not None:
            cfg = replace(cfg, n_per_stage=tuple(spec.n_per_stage))
        return cfg

    def synthetic_for_pretrain(self) -> SyntheticConfig:
        return replace(self.synthetic, seed=self.seed + PRETRAIN_SEED_OFFSET, n_controls=self.pretrain.n_subjects,
                       n_per_stage=(0, 0, 0, 0), site="pretrain", id_prefix="pre")

    def train_config(self, strategy: StrategySpec, run: int, pretrained_path: str | None = None) -> TrainConfig:
        return replace(self.train, seed=self.seed + run, kind=strategy.kind, balance=strategy.balance,
                       pretrained=pretrained_path if strategy.pretrained else None)


_SECTIONS = {
    "synthetic": SyntheticConfig,
    "split": SplitSpec,
    "train": TrainConfig,
    "occlusion": OcclusionConfig,
    "pretrain": PretrainSpec,
    "search": SearchSpec,
}
# seeds come from the top level only
_DERIVED = {"synthetic": {"seed"}, "split": {"seed"}, "train": {"seed", "pretrained"}}


def _build(cls, raw: Any, where: str, forbidden: set[str] = frozenset()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in fields(cls)} - set(forbidden)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict, seed: int | None = None, output: str | None = None,
                 runs: int | None = None) -> ExperimentConfig:
    """Validate a config dict; CLI overrides win over file values."""
    top = ({f.name for f in fields(ExperimentConfig)} - {"backbone_spec"}) | {"backbone"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    seed = int(raw.get("seed", 0)) if seed is None else seed
    kwargs: dict[str, Any] = {
        "seed": seed,
        "n_runs": int(raw.get("n_runs", 3)) if runs is None else runs,
        "output_dir": output or raw.get("output_dir", "experiment"),
    }
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        obj = _build(cls, section, name, _DERIVED.get(name, set()))
        if "seed" in {f.name for f in fields(cls)}:
            obj = replace(obj, seed=seed)
        kwargs[name] = obj
    kwargs["backbone_spec"] = _build(BackboneSpec, dict(raw.get("backbone", {})), "backbone")
    try:
        kwargs["backbone_spec"].build(kwargs["synthetic"].shape)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backbone: {exc}") from None
    strategies_raw = raw.get("strategies", [])
    if not isinstance(strategies_raw, list) or not isinstance(raw.get("ood", []), list):
        raise ConfigError("strategies and ood must be lists")
    kwargs["strategies"] = tuple(_build(StrategySpec, s, f"strategies[{i}]") for i, s in enumerate(strategies_raw))
    kwargs["ood"] = tuple(_build(OODSpec, o, f"ood[{i}]") for i, o in enumerate(raw.get("ood", [])))
    names = [o.name for o in kwargs["ood"]]
    if len(set(names)) != len(names) or {"train", "val", "test", "pre"} & set(names):
        raise ConfigError(f"ood names must be unique and not reuse split names: {names}")
    if kwargs["n_runs"] < 1:
        raise ConfigError("n_runs must be >= 1")
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(raw, **overrides)


def config_to_json(config: ExperimentConfig) -> dict:
    """Plain-JSON document that :func:`parse_config` turns back into ``config``.

    Derived fields (section seeds, the pretrained path) are left out.
    """
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if hasattr(v, "value"):
            return v.value
        return v
    doc = plain(config)
    doc["backbone"] = doc.pop("backbone_spec")
    for section, keys in _DERIVED.items():
        for key in keys:
            doc[section].pop(key, None)
    return doc
