"""3D DenseNet backbone with age, sex and diagnosis heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

CHECKPOINT_FORMAT_VERSION = 1


class Variant(str, Enum):
    DENSENET121_3D = "densenet121_3d"
    TINY_DENSENET_3D = "tiny_densenet_3d"


PRESETS = {
    Variant.DENSENET121_3D: dict(init_features=64, growth_rate=32, block_layers=(6, 12, 24, 16)),
    Variant.TINY_DENSENET_3D: dict(init_features=32, growth_rate=16, block_layers=(3, 6, 12, 8)),
}


@dataclass(frozen=True)
class BackboneConfig:
    variant: Variant = Variant.TINY_DENSENET_3D
    init_features: int = 32
    growth_rate: int = 16
    block_layers: tuple[int, int, int, int] = (3, 6, 12, 8)
    input_shape: tuple[int, int, int] = (32, 38, 32)
    bn_size: int = 4
    compression: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if len(self.block_layers) != 4:
            raise ValueError(f"block_layers needs 4 entries, got {self.block_layers}")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape needs 3 entries, got {self.input_shape}")

    @classmethod
    def preset(cls, variant: Variant | str, input_shape: Sequence[int] = (32, 38, 32)) -> "BackboneConfig":
        variant = Variant(variant)
        return cls(variant=variant, input_shape=tuple(input_shape), **PRESETS[variant])

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["block_layers"] = list(self.block_layers)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_json(cls, raw: dict) -> "BackboneConfig":
        return cls(**raw)


def _halve_ceil(n: int) -> int:
    return (n + 1) // 2


def feature_map_shape(input_shape: Sequence[int]) -> tuple[int, ...]:
    """Spatial shape entering the last dense block.

    Stride-2 stem conv and stride-2 max-pool (both round up), then three
    transition average-pools (round down).
    """
    out = []
    for n in input_shape:
        n = _halve_ceil(_halve_ceil(n))
        for _ in range(3):
            n //= 2
        out.append(n)
    return tuple(out)


def minimum_axis_length() -> int:
    n = 1
    while min(feature_map_shape((n, n, n))) < 1:
        n += 1
    return n


def _norm(channels: int) -> nn.GroupNorm:
    # at least 4 channels per group: late blocks can run at 1x1x1 spatial size,
    # where a single-channel group would normalize every input to its bias
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0 and (channels // g >= 4 or g == 1))
    return nn.GroupNorm(groups, channels)


class DenseLayer(nn.Module):
    def __init__(self, in_channels: int, growth_rate: int, bn_size: int):
        super().__init__()
        mid = bn_size * growth_rate
        self.layers = nn.Sequential(
            _norm(in_channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(in_channels, mid, kernel_size=1, bias=False),
            _norm(mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid, growth_rate, kernel_size=3, padding=1, bias=False),
        )

    def forward(self, x):
        return torch.cat([x, self.layers(x)], dim=1)


class Transition(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            _norm(in_channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(in_channels, out_channels, kernel_size=1, bias=False),
            nn.AvgPool3d(kernel_size=2, stride=2),
        )


class DenseNet3d(nn.Module):
    """Feature extractor ending in global average pooling."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        c = config.init_features
        layers: list[nn.Module] = [
            nn.Conv3d(1, c, kernel_size=7, stride=2, padding=3, bias=False),
            _norm(c),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(kernel_size=3, stride=2, padding=1),
        ]
        for i, n_layers in enumerate(config.block_layers):
            for _ in range(n_layers):
                layers.append(DenseLayer(c, config.growth_rate, config.bn_size))
                c += config.growth_rate
            if i < len(config.block_layers) - 1:
                out = int(math.floor(c * config.compression))
                layers.append(Transition(c, out))
                c = out
        layers += [_norm(c), nn.ReLU(inplace=True), nn.AdaptiveAvgPool3d(1), nn.Flatten()]
        self.features = nn.Sequential(*layers)
        self.out_features = c

    def forward(self, x):
        return self.features(x)


class MultiTaskModel(nn.Module):
    """Shared backbone feeding three scalar heads: age (linear), sex logit, dx logit."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.backbone = DenseNet3d(config)
        f = self.backbone.out_features
        self.age_head = nn.Linear(f, 1)
        self.sex_head = nn.Linear(f, 1)
        self.dx_head = nn.Linear(f, 1)
        # fixed reference age (years) added to the age head; not trained
        self.register_buffer("age_offset", torch.zeros(()))

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_features

    def forward(self, x: torch.Tensor):
        if x.dim() == 4:
            x = x.unsqueeze(1)
        if x.dim() != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.input_shape:
            raise ValueError(
                f"expected batch of shape (B, 1, {', '.join(map(str, self.config.input_shape))}), got {tuple(x.shape)}"
            )
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in input batch")
        feats = self.backbone(x)
        return self.age_head(feats) + self.age_offset, self.sex_head(feats), self.dx_head(feats)

    def dx_probability(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(x)[2]).reshape(-1)


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(config: BackboneConfig, seed: int = 0) -> MultiTaskModel:
    if min(feature_map_shape(config.input_shape)) < 1:
        raise ValueError(
            f"input shape {config.input_shape} too small for the pooling pyramid; "
            f"every axis needs at least {minimum_axis_length()} voxels"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = MultiTaskModel(config)
        init_weights(model)
    return model


def forward(model: MultiTaskModel, batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run ``model`` on a batch of volumes (array-like of shape (B, X, Y, Z))."""
    param = next(model.parameters())
    x = torch.as_tensor(batch, dtype=param.dtype)
    return model(x)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_differences(a: BackboneConfig, b: BackboneConfig) -> list[str]:
    """Architecture fields that differ; input_shape is excluded since pooling makes weights shape-agnostic."""
    return [
        f.name for f in fields(BackboneConfig)
        if f.name != "input_shape" and getattr(a, f.name) != getattr(b, f.name)
    ]


@dataclass
class Checkpoint:
    config: BackboneConfig
    tensors: dict[str, torch.Tensor]
    kind: str = "model"  # or "backbone"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tensors = {k: v.detach().to(torch.float32).contiguous().cpu() for k, v in self.tensors.items()}
        metadata = {
            "format_version": str(CHECKPOINT_FORMAT_VERSION),
            "kind": self.kind,
            "backbone_config": json.dumps(self.config.to_json(), sort_keys=True),
        }
        save_file(tensors, str(path), metadata=metadata)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
        version = int(meta.get("format_version", -1))
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        config = BackboneConfig.from_json(json.loads(meta["backbone_config"]))
        return cls(config, load_file(str(path)), meta.get("kind", "model"))


def model_checkpoint(model: MultiTaskModel) -> Checkpoint:
    return Checkpoint(model.config, {k: v.detach().clone() for k, v in model.state_dict().items()}, "model")


def backbone_checkpoint(model: MultiTaskModel) -> Checkpoint:
    state = {f"backbone.{k}": v.detach().clone() for k, v in model.backbone.state_dict().items()}
    return Checkpoint(model.config, state, "backbone")


def load_model(checkpoint: Checkpoint | str | Path) -> MultiTaskModel:
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    if checkpoint.kind != "model":
        raise ValueError("checkpoint holds only a backbone; use load_backbone_weights")
    model = build_model(checkpoint.config)
    model.load_state_dict(checkpoint.tensors)
    return model


def load_backbone_weights(model: MultiTaskModel, checkpoint: Checkpoint | str | Path) -> MultiTaskModel:
    """Copy backbone weights from ``checkpoint`` into ``model``; heads are left as they are."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    diff = config_differences(model.config, checkpoint.config)
    if diff:
        detail = ", ".join(f"{n}: {getattr(checkpoint.config, n)!r} vs {getattr(model.config, n)!r}" for n in diff)
        raise ValueError(f"checkpoint backbone config differs from model ({detail})")
    state = {k[len("backbone."):]: v for k, v in checkpoint.tensors.items() if k.startswith("backbone.")}
    param = next(model.parameters())
    model.backbone.load_state_dict({k: v.to(param.dtype) for k, v in state.items()})
    return model
