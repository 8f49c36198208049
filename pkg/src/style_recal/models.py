"""Residual network builder with per-block channel recalibration.

Supports the small basic-block nets used for 32x32 inputs (depths 6n+2) and
bottleneck nets with a 7x7-stem for 224x224 inputs. The recalibration layer
sits on the residual branch, after its final batch normalization and before
the shortcut addition. Downsampling bottleneck blocks stride in their first
1x1 convolution, which is the variant consistent with the reference
multiply-accumulate counts for the 224x224 nets.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import BatchNorm, Conv2d, Linear, MaxPool2d, Module, ModuleList, global_pool
from .recalib import ChannelRecalib, RecalibVariant, make_variant
from .tensor import Tensor, relu

__all__ = [
    "StageSpec",
    "ArchitectureConfig",
    "BasicBlock",
    "BottleneckBlock",
    "ResNet",
    "build_resnet",
    "forward_with_capture",
    "cifar_resnet_config",
    "imagenet_resnet50_config",
    "named_config",
    "BOTTLENECK_EXPANSION",
]

BOTTLENECK_EXPANSION = 4

GateTransform = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int


@dataclass
class ArchitectureConfig:
    stages: list[StageSpec]
    block_kind: str = "basic"
    recalib: RecalibVariant | None = None
    num_classes: int = 10
    in_channels: int = 3
    stem: str = "cifar"
    stem_channels: int | None = None

    def __post_init__(self):
        if not self.stages:
            raise ValueError("architecture: at least one stage required")
        for s in self.stages:
            if s.blocks < 1 or s.channels < 1:
                raise ValueError(f"architecture: invalid stage {s}")
        if self.stages[0].stride != 1:
            raise ValueError("architecture: first stage must have stride 1")
        if any(s.stride != 2 for s in self.stages[1:]):
            raise ValueError("architecture: stages after the first must have stride 2")
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"architecture: unknown block kind {self.block_kind!r}")
        if self.stem not in ("cifar", "imagenet"):
            raise ValueError(f"architecture: unknown stem {self.stem!r}")
        if self.block_kind == "bottleneck" and any(s.channels % BOTTLENECK_EXPANSION for s in self.stages):
            raise ValueError("architecture: bottleneck stage channels must be divisible by the expansion")

    def resolved_stem_channels(self) -> int:
        if self.stem_channels is not None:
            return self.stem_channels
        if self.stem == "imagenet":
            return 64
        c0 = self.stages[0].channels
        return c0 if self.block_kind == "basic" else c0 // BOTTLENECK_EXPANSION

    def to_dict(self) -> dict:
        return {
            "stages": [{"blocks": s.blocks, "channels": s.channels, "stride": s.stride} for s in self.stages],
            "block_kind": self.block_kind,
            "recalib": self.recalib.to_dict() if self.recalib is not None else None,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "stem": self.stem,
            "stem_channels": self.stem_channels,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchitectureConfig":
        return ArchitectureConfig(
            stages=[StageSpec(int(s["blocks"]), int(s["channels"]), int(s["stride"])) for s in d["stages"]],
            block_kind=d.get("block_kind", "basic"),
            recalib=parse_recalib(d.get("recalib")),
            num_classes=int(d.get("num_classes", 10)),
            in_channels=int(d.get("in_channels", 3)),
            stem=d.get("stem", "cifar"),
            stem_channels=d.get("stem_channels"),
        )

    @staticmethod
    def from_json(text: str) -> "ArchitectureConfig":
        return ArchitectureConfig.from_dict(json.loads(text))


def parse_recalib(spec) -> RecalibVariant | None:
    """Accept None, "none", "srm", "se", "se:<r>", a variant dict, or its JSON."""
    if spec is None or spec == "none":
        return None
    if isinstance(spec, RecalibVariant):
        return spec
    if isinstance(spec, str):
        if spec == "srm":
            return RecalibVariant.srm()
        if spec == "se":
            return RecalibVariant.se()
        if spec.startswith("se:"):
            return RecalibVariant.se(int(spec.split(":", 1)[1]))
        if spec.lstrip().startswith("{"):
            try:
                return RecalibVariant.from_dict(json.loads(spec))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"malformed recalib variant JSON: {exc}") from exc
        raise ValueError(f"unknown recalib spec {spec!r}; expected none|srm|se|se:<r> or a variant object")
    if isinstance(spec, dict):
        return RecalibVariant.from_dict(spec)
    raise ValueError(f"unknown recalib spec {spec!r}")


class BasicBlock(Module):
    """conv3x3 - BN - ReLU - conv3x3 - BN [- recalib], plus shortcut."""

    convs_in_branch = 2

    def __init__(self, in_channels: int, channels: int, stride: int,
                 variant: RecalibVariant | None, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_channels, channels, 3, stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm(channels)
        self.recalib = make_variant(channels, variant, rng=rng) if variant is not None else None
        if stride != 1 or in_channels != channels:
            self.proj_conv = Conv2d(in_channels, channels, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm(channels)
        else:
            self.proj_conv = None
            self.proj_bn = None

    @property
    def has_identity_shortcut(self) -> bool:
        return self.proj_conv is None

    def branch(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(h))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.proj_conv is None:
            return x
        return self.proj_bn(self.proj_conv(x))

    def forward(self, x: Tensor, gate_cb=None) -> Tensor:
        b = self.branch(x)
        if self.recalib is not None:
            b = self.recalib(b, gate_cb)
        return relu(b + self.shortcut(x))


class BottleneckBlock(Module):
    """1x1 - 3x3 - 1x1 bottleneck with the stride on the first 1x1."""

    convs_in_branch = 3

    def __init__(self, in_channels: int, channels: int, stride: int,
                 variant: RecalibVariant | None, rng: np.random.Generator):
        super().__init__()
        width = channels // BOTTLENECK_EXPANSION
        self.conv1 = Conv2d(in_channels, width, 1, stride=stride, rng=rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, stride=1, padding=1, rng=rng)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv2d(width, channels, 1, stride=1, rng=rng)
        self.bn3 = BatchNorm(channels)
        self.recalib = make_variant(channels, variant, rng=rng) if variant is not None else None
        if stride != 1 or in_channels != channels:
            self.proj_conv = Conv2d(in_channels, channels, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm(channels)
        else:
            self.proj_conv = None
            self.proj_bn = None

    @property
    def has_identity_shortcut(self) -> bool:
        return self.proj_conv is None

    def branch(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = relu(self.bn2(self.conv2(h)))
        return self.bn3(self.conv3(h))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.proj_conv is None:
            return x
        return self.proj_bn(self.proj_conv(x))

    def forward(self, x: Tensor, gate_cb=None) -> Tensor:
        b = self.branch(x)
        if self.recalib is not None:
            b = self.recalib(b, gate_cb)
        return relu(b + self.shortcut(x))


class ResNet(Module):
    def __init__(self, config: ArchitectureConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        stem_ch = config.resolved_stem_channels()
        if config.stem == "cifar":
            self.stem_conv = Conv2d(config.in_channels, stem_ch, 3, stride=1, padding=1, rng=rng)
            self.stem_pool = None
        else:
            self.stem_conv = Conv2d(config.in_channels, stem_ch, 7, stride=2, padding=3, rng=rng)
            self.stem_pool = MaxPool2d(3, stride=2, padding=1)
        self.stem_bn = BatchNorm(stem_ch)

        block_cls = BasicBlock if config.block_kind == "basic" else BottleneckBlock
        self.stages = ModuleList()
        in_ch = stem_ch
        for spec in config.stages:
            blocks = ModuleList()
            for b in range(spec.blocks):
                stride = spec.stride if b == 0 else 1
                blocks.append(block_cls(in_ch, spec.channels, stride, config.recalib, rng))
                in_ch = spec.channels
            self.stages.append(blocks)
        self.classifier = Linear(in_ch, config.num_classes, bias=True, rng=rng)

    def stem(self, x: Tensor) -> Tensor:
        h = relu(self.stem_bn(self.stem_conv(x)))
        if self.stem_pool is not None:
            h = self.stem_pool(h)
        return h

    def run_stage(self, stage_idx: int, h: Tensor, gate_transform: GateTransform | None = None,
                  capture: dict | None = None) -> Tensor:
        for block_idx, block in enumerate(self.stages[stage_idx]):
            cb = None
            if block.recalib is not None and (gate_transform is not None or capture is not None):
                cb = _gate_cb(stage_idx, block_idx, gate_transform, capture)
            h = block(h, cb)
        return h

    def forward(self, x: Tensor, gate_transform: GateTransform | None = None,
                capture: dict | None = None) -> Tensor:
        h = self.stem(x)
        for stage_idx in range(len(self.stages)):
            h = self.run_stage(stage_idx, h, gate_transform, capture)
        return self.classifier(global_pool(h, "avg"))

    def recalib_layers(self) -> list[tuple[int, int, ChannelRecalib]]:
        out = []
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                if block.recalib is not None:
                    out.append((si, bi, block.recalib))
        return out

    def fold_bn(self) -> int:
        """Fold every foldable recalibration BN; returns the number folded."""
        folded = 0
        for _, _, layer in self.recalib_layers():
            if layer.can_fold:
                layer.fold()
                folded += 1
        return folded

    @property
    def weighted_layer_count(self) -> int:
        """Stem conv + residual-branch convs + classifier (projections excluded)."""
        count = 1 + 1  # stem conv, classifier
        for stage in self.stages:
            for block in stage:
                count += block.convs_in_branch
        return count


def _gate_cb(stage_idx: int, block_idx: int, gate_transform: GateTransform | None,
             capture: dict | None):
    def cb(g: np.ndarray) -> np.ndarray:
        if capture is not None:
            capture[(stage_idx, block_idx)] = g.copy()
        if gate_transform is not None:
            g = gate_transform(stage_idx, block_idx, g)
        return g

    return cb


def build_resnet(config: ArchitectureConfig, seed: int = 0) -> ResNet:
    return ResNet(config, np.random.default_rng(seed))


def forward_with_capture(model: ResNet, x: Tensor) -> tuple[Tensor, dict[tuple[int, int], np.ndarray]]:
    """Eval forward returning logits plus each layer's gate matrix keyed by (stage, block)."""
    capture: dict[tuple[int, int], np.ndarray] = {}
    if not model.recalib_layers():
        warnings.warn("capture requested on a model without recalibration layers; record is empty")
        return model(x), capture
    logits = model(x, capture=capture)
    return logits, capture


def cifar_resnet_config(depth: int, recalib: RecalibVariant | str | None = None,
                        num_classes: int = 10) -> ArchitectureConfig:
    """Basic-block net of depth 6n+2 on 16/32/64-channel stages."""
    if (depth - 2) % 6 != 0:
        raise ValueError(f"cifar resnet depth must be 6n+2, got {depth}")
    n = (depth - 2) // 6
    return ArchitectureConfig(
        stages=[StageSpec(n, 16, 1), StageSpec(n, 32, 2), StageSpec(n, 64, 2)],
        block_kind="basic",
        recalib=parse_recalib(recalib),
        num_classes=num_classes,
        stem="cifar",
    )


def imagenet_resnet50_config(recalib: RecalibVariant | str | None = None,
                             num_classes: int = 1000) -> ArchitectureConfig:
    return ArchitectureConfig(
        stages=[
            StageSpec(3, 256, 1),
            StageSpec(4, 512, 2),
            StageSpec(6, 1024, 2),
            StageSpec(3, 2048, 2),
        ],
        block_kind="bottleneck",
        recalib=parse_recalib(recalib),
        num_classes=num_classes,
        stem="imagenet",
    )


_NAMED = {
    "resnet20": lambda r: cifar_resnet_config(20, r),
    "resnet32": lambda r: cifar_resnet_config(32, r),
    "resnet56": lambda r: cifar_resnet_config(56, r),
    "resnet50": lambda r: imagenet_resnet50_config(r),
}


def named_config(name: str, recalib=None) -> ArchitectureConfig:
    if name not in _NAMED:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(_NAMED)}")
    return _NAMED[name](recalib)
