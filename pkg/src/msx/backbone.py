"""Residual convolutional encoder emitting three multi-scale feature maps.

A stem (7x7 stride-2 conv, 3x3 stride-2 maxpool, one stride-2 residual
stage) brings the input down by 8x; three further residual blocks at unit
stride then widen the channels while keeping the spatial extent, so all
three emitted maps share the same side length. Weights can be loaded from a
checkpoint and frozen, excluding them from gradient updates and keeping
batchnorm in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ResidualBlock, load_state
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    profile: str
    input_side: int
    stem_in: int
    stem_channels: int
    block_channels: tuple[int, int, int]
    frozen: bool = False

    def __post_init__(self):
        c2, c3, c4 = self.block_channels
        if not (c2 < c3 < c4):
            raise ValueError(f"block channels must strictly increase, got {self.block_channels}")
        if self.input_side % 8:
            raise ValueError(f"input side must be divisible by 8, got {self.input_side}")

    @property
    def feature_side(self) -> int:
        return self.input_side // 8

    @staticmethod
    def desk(frozen: bool = False) -> "BackboneConfig":
        return BackboneConfig("desk", 64, 1, 8, (32, 64, 128), frozen)

    @staticmethod
    def paper(frozen: bool = False) -> "BackboneConfig":
        return BackboneConfig("paper", 512, 3, 128, (512, 1024, 2048), frozen)


@dataclass
class FeatureTriple:
    block2: Tensor
    block3: Tensor
    block4: Tensor

    def shapes(self) -> tuple[tuple[int, ...], ...]:
        return (self.block2.shape, self.block3.shape, self.block4.shape)


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c0 = cfg.stem_channels
        c2, c3, c4 = cfg.block_channels
        self.stem_conv = Conv2d(cfg.stem_in, c0, 7, rng, stride=2, padding=3, bias=False, dtype=dtype)
        self.stem_bn = BatchNorm2d(c0, dtype=dtype)
        self.stage1 = ResidualBlock(c0, 2 * c0, rng, stride=2, dtype=dtype)
        self.block2 = ResidualBlock(2 * c0, c2, rng, dtype=dtype)
        self.block3 = ResidualBlock(c2, c3, rng, dtype=dtype)
        self.block4 = ResidualBlock(c3, c4, rng, dtype=dtype)
        self.frozen = False
        if cfg.frozen:
            self.set_frozen(True)

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for _, p in self.named_params(""):
            p.requires_grad = not frozen

    def forward(self, image: Tensor, training: bool = False) -> FeatureTriple:
        squeeze = image.ndim == 3
        if squeeze:
            image = T.reshape(image, (1,) + image.shape)
        n, c, h, w = image.shape
        if h != self.cfg.input_side or w != self.cfg.input_side:
            raise ShapeError(f"backbone built for {self.cfg.input_side}px input, got {image.shape}")
        if c == 1 and self.cfg.stem_in > 1:
            image = T.concat([image] * self.cfg.stem_in, axis=1)
        elif c != self.cfg.stem_in:
            raise ShapeError(f"stem expects {self.cfg.stem_in} channels, got {image.shape}")
        train = training and not self.frozen
        x = T.relu(self.stem_bn(self.stem_conv(image), train))
        x = T.maxpool2d(x, 3, stride=2, padding=1)
        x = self.stage1(x, train)
        b2 = self.block2(x, train)
        b3 = self.block3(b2, train)
        b4 = self.block4(b3, train)
        if squeeze:
            b2, b3, b4 = (T.reshape(b, b.shape[1:]) for b in (b2, b3, b4))
        return FeatureTriple(b2, b3, b4)

    def named_params(self, prefix: str = ""):
        yield from self.stem_conv.named_params(prefix + ".stem_conv")
        yield from self.stem_bn.named_params(prefix + ".stem_bn")
        yield from self.stage1.named_params(prefix + ".stage1")
        yield from self.block2.named_params(prefix + ".block2")
        yield from self.block3.named_params(prefix + ".block3")
        yield from self.block4.named_params(prefix + ".block4")

    def named_state(self, prefix: str = ""):
        yield from self.stem_conv.named_state(prefix + ".stem_conv")
        yield from self.stem_bn.named_state(prefix + ".stem_bn")
        yield from self.stage1.named_state(prefix + ".stage1")
        yield from self.block2.named_state(prefix + ".block2")
        yield from self.block3.named_state(prefix + ".block3")
        yield from self.block4.named_state(prefix + ".block4")

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {"backbone": [p for _, p in self.named_params("")]}


def load_freeze(backbone: Backbone, state: dict[str, np.ndarray], frozen: bool) -> Backbone:
    """Install checkpoint arrays into the backbone and set its freeze flag."""
    load_state(backbone, state)
    backbone.set_frozen(frozen)
    return backbone
