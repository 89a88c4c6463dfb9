"""Multi-scale fusion classifier: 1x1 channel reductions, attention pooling
with a global-average query, and a sigmoid head.

Two branches by default: the deepest feature map reduced to ``r4`` channels,
and the two shallower maps reduced to ``r23`` each and concatenated. Each
branch is pooled to a channel-length vector by scaled dot-product attention
over spatial tokens (the pooled mean acts as the query); the concatenated
vectors feed a dense layer + sigmoid. Ablation knobs select block subsets,
independent vs merged shallow branches, and plain GAP instead of attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear
from .tensor import ShapeError, Tensor

BCE_EPS = 1e-7


@dataclass(frozen=True)
class FusionConfig:
    c_b2: int
    c_b3: int
    c_b4: int
    r4: int = 64
    r23: int = 32
    use_projections: bool = True

    def __post_init__(self):
        if min(self.c_b2, self.c_b3, self.c_b4, self.r4, self.r23) < 1:
            raise ValueError("all channel counts must be positive")
        if self.r23 * 2 != self.r4:
            raise ValueError(f"r23*2 must equal r4, got r23={self.r23}, r4={self.r4}")

    @property
    def d_k(self) -> int:
        return self.r4


class AttentionPool:
    """Pool a feature map to one channel-length vector via attention.

    Tokens are the h*w spatial positions (each a c-vector); the query is the
    global average of the map unless an external query is supplied. Optional
    learnable square projections W_q/W_k/W_v/W_o (with bias) wrap the raw
    scaled-dot-product core.
    """

    def __init__(self, channels: int, rng: np.random.Generator, projections: bool = True, dtype=np.float32):
        self.d_k = channels
        if projections:
            self.wq = Linear(channels, channels, rng, dtype=dtype)
            self.wk = Linear(channels, channels, rng, dtype=dtype)
            self.wv = Linear(channels, channels, rng, dtype=dtype)
            self.wo = Linear(channels, channels, rng, dtype=dtype)
            # start as exact global average pooling: zero query projection
            # gives uniform weights, identity value/output passes tokens
            # through; training then moves attention away from uniform only
            # where it pays off
            self.wq.w.data[:] = 0.0
            self.wk.w.data[:] = np.eye(channels, dtype=dtype)
            self.wv.w.data[:] = np.eye(channels, dtype=dtype)
            self.wo.w.data[:] = np.eye(channels, dtype=dtype)
        else:
            self.wq = self.wk = self.wv = self.wo = None

    def __call__(self, x: Tensor, query: Tensor | None = None, return_weights: bool = False):
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise ShapeError(f"attention pool expects (c,h,w) or (n,c,h,w), got {x.shape}")
        n, c, h, w = x.shape
        if c != self.d_k:
            raise ShapeError(f"attention pool built for {self.d_k} channels, got map {x.shape}")
        hw = h * w
        xf = T.reshape(x, (n, c, hw))
        if query is None:
            q = T.gap(x)
        else:
            q = T.reshape(query, (1, c)) if query.ndim == 1 else query
            if q.shape != (n, c):
                raise ShapeError(f"query shape {query.shape} does not match map {x.shape}")
        if self.wq is not None:
            q = self.wq(q)
            keys = T.add(T.lmatmul(self.wk.w, xf), T.reshape(self.wk.b, (1, c, 1)))
            vals = T.add(T.lmatmul(self.wv.w, xf), T.reshape(self.wv.b, (1, c, 1)))
        else:
            keys = vals = xf
        scores = T.bmm(T.reshape(q, (n, 1, c)), keys)  # (n,1,hw): query row dotted with keys
        weights = T.softmax(T.mul(scores, Tensor(np.asarray(1.0 / np.sqrt(self.d_k), dtype=x.dtype))))
        pooled = T.bmm(vals, T.reshape(weights, (n, hw, 1)))  # (n,c,1)
        pooled = T.reshape(pooled, (n, c))
        if self.wo is not None:
            pooled = self.wo(pooled)
        if squeeze:
            pooled = T.reshape(pooled, (c,))
        if return_weights:
            return pooled, T.reshape(weights, (hw,) if squeeze else (n, hw))
        return pooled

    def named_params(self, prefix: str):
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            if lin is not None:
                yield from lin.named_params(f"{prefix}.{name}")

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)


class FusionClassifier:
    """Configurable classifier over the backbone's three feature maps."""

    def __init__(
        self,
        cfg: FusionConfig,
        rng: np.random.Generator,
        blocks: tuple[int, ...] = (2, 3, 4),
        merge23: bool = True,
        use_transformer: bool = True,
        dtype=np.float32,
    ):
        blocks = tuple(sorted(set(blocks)))
        if 4 not in blocks:
            raise ValueError("block 4 must always be part of the classifier")
        if any(b not in (2, 3, 4) for b in blocks):
            raise ValueError(f"blocks must be a subset of {{2,3,4}}, got {blocks}")
        if merge23 and not {2, 3} <= set(blocks):
            raise ValueError("merge23 requires both blocks 2 and 3")
        self.cfg = cfg
        self.blocks = blocks
        self.merge23 = merge23
        self.use_transformer = use_transformer
        self.reduce4 = Conv2d(cfg.c_b4, cfg.r4, 1, rng, dtype=dtype)
        self.reduce2 = Conv2d(cfg.c_b2, cfg.r23, 1, rng, dtype=dtype) if 2 in blocks else None
        self.reduce3 = Conv2d(cfg.c_b3, cfg.r23, 1, rng, dtype=dtype) if 3 in blocks else None
        # one pooled branch per feature map fed to the head
        widths = [cfg.r4]
        if merge23:
            widths.append(2 * cfg.r23)
        else:
            widths.extend(cfg.r23 for b in blocks if b in (2, 3))
        self.branch_widths = tuple(widths)
        if use_transformer:
            self.pools = [AttentionPool(wd, rng, cfg.use_projections, dtype) for wd in widths]
        else:
            self.pools = []
        self.head = Linear(sum(widths), 1, rng, dtype=dtype)

    # -- spec'd building blocks ------------------------------------------

    def reduce_b4(self, b4: Tensor) -> Tensor:
        c = b4.shape[-3]
        if c != self.cfg.c_b4:
            raise ShapeError(f"expected {self.cfg.c_b4} channels for the deep map, got {b4.shape}")
        return self.reduce4(b4)

    def reduce_and_merge(self, b2: Tensor, b3: Tensor) -> Tensor:
        if self.reduce2 is None or self.reduce3 is None:
            raise ValueError("classifier was built without blocks 2 and 3")
        if b2.shape[-3] != self.cfg.c_b2:
            raise ShapeError(f"expected {self.cfg.c_b2} channels, got {b2.shape}")
        if b3.shape[-3] != self.cfg.c_b3:
            raise ShapeError(f"expected {self.cfg.c_b3} channels, got {b3.shape}")
        if b2.shape[-2:] != b3.shape[-2:]:
            raise ShapeError(f"spatial extents differ: {b2.shape} vs {b3.shape}")
        channel_axis = b2.ndim - 3
        return T.concat([self.reduce2(b2), self.reduce3(b3)], axis=channel_axis)

    # -- forward ------------------------------------------------------------

    def _branch_maps(self, b2, b3, b4) -> list[Tensor]:
        maps = [self.reduce_b4(b4)]
        if self.merge23:
            maps.append(self.reduce_and_merge(b2, b3))
        else:
            if self.reduce2 is not None:
                maps.append(self.reduce2(b2))
            if self.reduce3 is not None:
                maps.append(self.reduce3(b3))
        return maps

    def classify(self, b2: Tensor | None, b3: Tensor | None, b4: Tensor) -> Tensor:
        """Probability of the positive class, shape (n,)."""
        squeeze = b4.ndim == 3
        if squeeze:
            b2 = b2 if b2 is None else T.reshape(b2, (1,) + b2.shape)
            b3 = b3 if b3 is None else T.reshape(b3, (1,) + b3.shape)
            b4 = T.reshape(b4, (1,) + b4.shape)
        maps = self._branch_maps(b2, b3, b4)
        if self.use_transformer:
            vecs = [pool(m) for pool, m in zip(self.pools, maps)]
        else:
            vecs = [T.gap(m) for m in maps]
        feat = vecs[0] if len(vecs) == 1 else T.concat(vecs, axis=1)
        logit = self.head(feat)  # (n,1)
        return T.reshape(T.sigmoid(logit), (logit.shape[0],))

    # -- bookkeeping ----------------------------------------------------------

    def param_groups(self) -> dict[str, list[Tensor]]:
        reductions = [p for r in (self.reduce4, self.reduce2, self.reduce3) if r is not None
                      for _, p in r.named_params("")]
        attention = [p for pool in self.pools for _, p in pool.named_params("")]
        head = [p for _, p in self.head.named_params("")]
        return {"reductions": reductions, "attention": attention, "head": head}

    def named_params(self, prefix: str):
        yield from self.reduce4.named_params(prefix + ".reduce4")
        if self.reduce2 is not None:
            yield from self.reduce2.named_params(prefix + ".reduce2")
        if self.reduce3 is not None:
            yield from self.reduce3.named_params(prefix + ".reduce3")
        for i, pool in enumerate(self.pools):
            yield from pool.named_params(f"{prefix}.pool{i}")
        yield from self.head.named_params(prefix + ".head")

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    y = np.asarray(labels, dtype=probs.dtype)
    if probs.size == 0:
        raise ShapeError("bce_loss: empty batch")
    if y.shape != probs.shape:
        raise ShapeError(f"bce_loss: probabilities {probs.shape} vs labels {y.shape}")
    p = T.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    yt = Tensor(y)
    ones = Tensor(np.ones_like(y))
    ll = T.add(T.mul(yt, T.log(p)), T.mul(T.sub(ones, yt), T.log(T.sub(ones, p))))
    return T.neg(T.tmean(ll))


def parameter_count(groups: dict[str, list[Tensor]]) -> dict[str, int]:
    """Trainable scalar count per component plus the grand total."""
    out = {name: sum(p.size for p in ps if p.requires_grad) for name, ps in groups.items()}
    out["total"] = sum(out.values())
    return out
