"""Segmentation network: double-conv encoder, attention bottleneck, gated skips.

The bottleneck adds a 1x1 token embedding plus fixed 2-D sinusoidal
positional encodings and pools itself into a query vector. Each skip
connection is then gated: the query chained up from the level below is
adapted to the skip's channel count, drives an attention pool over the skip
map, and the sigmoid of the pooled vector multiplies the skip channels
before decoding. The decoder upsamples, concatenates the gated skip, and
refines with a double conv down to the skip's width; a final 1x1 conv emits
single-channel mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fusion import AttentionPool
from .nn import Conv2d, DoubleConv, Linear
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 8
    input_side: int = 64
    gate_projections: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.input_side % (2**self.depth):
            raise ValueError(
                f"input side {self.input_side} not divisible by 2^depth = {2 ** self.depth}"
            )

    def stage_channels(self, i: int) -> int:
        return self.base_channels * (2**i)

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * (2**self.depth)

    @staticmethod
    def desk() -> "UNetConfig":
        return UNetConfig(4, 8, 64)

    @staticmethod
    def paper() -> "UNetConfig":
        return UNetConfig(4, 64, 512)


def positional_encoding(c: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, interleaved sin/cos per axis.

    First c/2 channels encode the row position, the rest the column; at
    position (0,0) the whole channel vector is the pattern [0,1,0,1,...].
    """
    if c % 4:
        raise ValueError(f"positional encoding needs channels divisible by 4, got {c}")
    half = c // 2
    pe = np.zeros((c, h, w), dtype=dtype)
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    for i in range(half // 2):
        freq = 1.0 / (10000.0 ** (2.0 * i / half))
        pe[2 * i, :, :] = np.sin(ys * freq)[:, None]
        pe[2 * i + 1, :, :] = np.cos(ys * freq)[:, None]
        pe[half + 2 * i, :, :] = np.sin(xs * freq)[None, :]
        pe[half + 2 * i + 1, :, :] = np.cos(xs * freq)[None, :]
    return pe


class SkipGate:
    """Gate one skip connection with an attention pool driven from below."""

    def __init__(self, channels: int, below_channels: int, rng, projections: bool, dtype):
        self.channels = channels
        self.adapter = Linear(below_channels, channels, rng, dtype=dtype)
        self.pool = AttentionPool(channels, rng, projections=projections, dtype=dtype)

    def __call__(self, skip: Tensor, query_below: Tensor) -> tuple[Tensor, Tensor]:
        if query_below.shape[-1] != self.adapter.w.shape[1]:
            raise ShapeError(
                f"gate adapter expects query width {self.adapter.w.shape[1]}, got {query_below.shape}"
            )
        q = self.adapter(query_below)
        pooled = self.pool(skip, query=q)
        gate = T.sigmoid(pooled)
        n, c = (1, gate.size) if gate.ndim == 1 else gate.shape
        shape = (c, 1, 1) if skip.ndim == 3 else (n, c, 1, 1)
        gated = T.mul(skip, T.reshape(gate, shape))
        return gated, pooled

    def named_params(self, prefix: str):
        yield from self.adapter.named_params(prefix + ".adapter")
        yield from self.pool.named_params(prefix + ".pool")

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)


class TransUNet:
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.depth
        self.enc = []
        for i in range(d):
            c_in = 1 if i == 0 else cfg.stage_channels(i - 1)
            self.enc.append(DoubleConv(c_in, cfg.stage_channels(i), rng, dtype=dtype))
        cb = cfg.bottleneck_channels
        self.bottleneck = DoubleConv(cfg.stage_channels(d - 1), cb, rng, dtype=dtype)
        self.embed = Conv2d(cb, cb, 1, rng, dtype=dtype)
        side = cfg.input_side // (2**d)
        self.pe = Tensor(positional_encoding(cb, side, side, dtype=dtype))
        self.bottleneck_pool = AttentionPool(cb, rng, projections=cfg.gate_projections, dtype=dtype)
        self.gates = []
        self.dec = []
        for i in reversed(range(d)):
            c_i = cfg.stage_channels(i)
            self.gates.append(SkipGate(c_i, 2 * c_i, rng, cfg.gate_projections, dtype))
            self.dec.append(DoubleConv(3 * c_i, c_i, rng, dtype=dtype))
        self.final = Conv2d(cfg.base_channels, 1, 1, rng, dtype=dtype)

    # -- pieces ------------------------------------------------------------

    def encode(self, image: Tensor, training: bool) -> tuple[list[Tensor], Tensor]:
        """Per-stage pre-pool skip features plus the pooled trunk (batched)."""
        if image.shape[-1] != self.cfg.input_side or image.shape[-2] != self.cfg.input_side:
            raise ShapeError(f"unet built for {self.cfg.input_side}px input, got {image.shape}")
        x = T.reshape(image, (1,) + image.shape) if image.ndim == 3 else image
        skips = []
        for block in self.enc:
            x = block(x, training)
            skips.append(x)
            x = T.maxpool2d(x, 2)
        return skips, x

    def bottleneck_tokens(self, trunk: Tensor, training: bool) -> tuple[Tensor, Tensor, Tensor]:
        """Bottleneck map, its positional-encoded tokens, and the pooled query."""
        b = self.bottleneck(trunk, training)
        tokens = T.add(self.embed(b), self.pe)
        query = self.bottleneck_pool(tokens)
        return b, tokens, query

    def decode(self, bottleneck_map: Tensor, gated_skips: list[Tensor], training: bool) -> Tensor:
        """gated_skips ordered deep -> shallow; returns (*,1,H,W) logits."""
        x = bottleneck_map
        for block, skip in zip(self.dec, gated_skips):
            x = T.upsample2d(x, 2)
            axis = x.ndim - 3
            x = T.concat([x, skip], axis=axis)
            x = block(x, training)
        return self.final(x)

    def forward(self, image: Tensor, training: bool = False, trace: list | None = None) -> Tensor:
        squeeze = image.ndim == 3
        skips, trunk = self.encode(image, training)
        b, _, query = self.bottleneck_tokens(trunk, training)
        gated = []
        for gate, skip in zip(self.gates, reversed(skips)):
            if trace is not None:
                trace.append({"channels": gate.channels, "query_in": query})
            g, query = gate(skip, query)
            if trace is not None:
                trace[-1]["pooled"] = query
            gated.append(g)
        logits = self.decode(b, gated, training)
        return T.reshape(logits, logits.shape[1:]) if squeeze else logits

    # -- losses / prediction -------------------------------------------------

    def named_params(self, prefix: str = ""):
        for i, block in enumerate(self.enc):
            yield from block.named_params(f"{prefix}.enc{i}")
        yield from self.bottleneck.named_params(prefix + ".bottleneck")
        yield from self.embed.named_params(prefix + ".embed")
        yield from self.bottleneck_pool.named_params(prefix + ".bottleneck_pool")
        for i, gate in enumerate(self.gates):
            yield from gate.named_params(f"{prefix}.gate{i}")
        for i, block in enumerate(self.dec):
            yield from block.named_params(f"{prefix}.dec{i}")
        yield from self.final.named_params(prefix + ".final")

    def named_state(self, prefix: str = ""):
        for i, block in enumerate(self.enc):
            yield from block.named_state(f"{prefix}.enc{i}")
        yield from self.bottleneck.named_state(prefix + ".bottleneck")
        yield from self.embed.named_state(prefix + ".embed")
        yield from self.bottleneck_pool.named_state(prefix + ".bottleneck_pool")
        for i, gate in enumerate(self.gates):
            yield from gate.named_state(f"{prefix}.gate{i}")
        for i, block in enumerate(self.dec):
            yield from block.named_state(f"{prefix}.dec{i}")
        yield from self.final.named_state(prefix + ".final")

    def param_groups(self) -> dict[str, list[Tensor]]:
        enc = [p for b in self.enc for _, p in b.named_params("")]
        bott = [p for _, p in self.bottleneck.named_params("")]
        bott += [p for _, p in self.embed.named_params("")]
        bott += [p for _, p in self.bottleneck_pool.named_params("")]
        gates = [p for g in self.gates for _, p in g.named_params("")]
        dec = [p for b in self.dec for _, p in b.named_params("")]
        dec += [p for _, p in self.final.named_params("")]
        return {"encoder": enc, "bottleneck": bott, "gates": gates, "decoder": dec}


def seg_loss(logits: Tensor, mask, dice_weight: float = 0.0) -> Tensor:
    """Pixelwise BCE-with-logits, optionally blended with a soft Dice term."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=logits.dtype)
    if m.size == 0:
        raise ShapeError("seg_loss: empty mask")
    if m.shape != logits.shape:
        raise ShapeError(f"seg_loss: logits {logits.shape} vs mask {m.shape}")
    loss = T.bce_with_logits(logits, m)
    if dice_weight:
        p = T.sigmoid(logits)
        yt = Tensor(m)
        smooth = 1.0
        overlap = T.tsum(T.mul(p, yt)) * 2.0 + smooth
        total = T.tsum(p) + float(m.sum()) + smooth
        loss = loss + dice_weight * (1.0 - overlap / total)
    return loss


def predict_mask(model: TransUNet, image: Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary {0,1} mask: sigmoid(logits) >= threshold."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    with T.no_grad():
        logits = model.forward(x, training=False)
    probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
    return (probs >= threshold).astype(np.float32)
