"""Parameterized layers built on the autodiff tensor core.

Layers hold their weights as Tensors; models compose layers and expose
``named_params`` (trainable tensors) and ``state`` (all arrays, including
batchnorm running statistics) for optimizers and checkpoints.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import BnStats, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        dtype=np.float32,
    ):
        self.stride = stride
        self.padding = padding
        fan_in = c_in * k * k
        self.w = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            c = self.b.size
            out = T.add(out, T.reshape(self.b, (c, 1, 1)))
        return out

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.w = Tensor(kaiming_uniform(rng, (d_out, d_in), d_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        """x: (n, d_in) rows or a (d_in,) vector."""
        vec = x.ndim == 1
        if vec:
            x = T.reshape(x, (1, x.size))
        out = T.matmul(x, T.transpose(self.w))
        if self.b is not None:
            out = T.add(out, T.reshape(self.b, (1, self.b.size)))
        return T.reshape(out, (out.shape[1],)) if vec else out

    def named_params(self, prefix: str):
        yield prefix + ".w", self.w
        if self.b is not None:
            yield prefix + ".b", self.b

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)


class BatchNorm2d:
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = BnStats(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.stats, eps=self.eps, momentum=self.momentum, training=training
        )

    def named_params(self, prefix: str):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_state(self, prefix: str):
        yield from self.named_params(prefix)
        yield prefix + ".running_mean", self.stats.mean
        yield prefix + ".running_var", self.stats.var


class ConvBnRelu:
    """conv3x3 (same padding) + batchnorm + relu."""

    def __init__(self, c_in: int, c_out: int, rng, k: int = 3, stride: int = 1, dtype=np.float32):
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride, padding=k // 2, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.bn(self.conv(x), training))

    def named_params(self, prefix: str):
        yield from self.conv.named_params(prefix + ".conv")
        yield from self.bn.named_params(prefix + ".bn")

    def named_state(self, prefix: str):
        yield from self.conv.named_state(prefix + ".conv")
        yield from self.bn.named_state(prefix + ".bn")


class DoubleConv:
    """Two consecutive conv3x3 + batchnorm + relu blocks."""

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float32):
        self.a = ConvBnRelu(c_in, c_out, rng, dtype=dtype)
        self.b = ConvBnRelu(c_out, c_out, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.b(self.a(x, training), training)

    def named_params(self, prefix: str):
        yield from self.a.named_params(prefix + ".a")
        yield from self.b.named_params(prefix + ".b")

    def named_state(self, prefix: str):
        yield from self.a.named_state(prefix + ".a")
        yield from self.b.named_state(prefix + ".b")


class ResidualBlock:
    """Two conv3x3+bn with relu, identity shortcut (1x1 conv on shape change)."""

    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1, dtype=np.float32):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.short = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False, dtype=dtype)
            self.short_bn = BatchNorm2d(c_out, dtype=dtype)
        else:
            self.short = None
            self.short_bn = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        s = x if self.short is None else self.short_bn(self.short(x), training)
        return T.relu(T.add(y, s))

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(prefix + ".conv1")
        yield from self.bn1.named_params(prefix + ".bn1")
        yield from self.conv2.named_params(prefix + ".conv2")
        yield from self.bn2.named_params(prefix + ".bn2")
        if self.short is not None:
            yield from self.short.named_params(prefix + ".short")
            yield from self.short_bn.named_params(prefix + ".short_bn")

    def named_state(self, prefix: str):
        yield from self.conv1.named_state(prefix + ".conv1")
        yield from self.bn1.named_state(prefix + ".bn1")
        yield from self.conv2.named_state(prefix + ".conv2")
        yield from self.bn2.named_state(prefix + ".bn2")
        if self.short is not None:
            yield from self.short.named_state(prefix + ".short")
            yield from self.short_bn.named_state(prefix + ".short_bn")


def collect_state(model) -> dict[str, np.ndarray]:
    """Snapshot all weights and buffers as plain arrays keyed by name."""
    out = {}
    for name, val in model.named_state(""):
        arr = val.data if isinstance(val, Tensor) else val
        out[name.lstrip(".")] = np.array(arr, copy=True)
    return out


class LoadError(ValueError):
    """A checkpoint tensor is missing or has the wrong shape."""


def load_state(model, state: dict[str, np.ndarray]) -> None:
    """Install arrays into the model in place, validating name and shape."""
    for name, val in model.named_state(""):
        key = name.lstrip(".")
        if key not in state:
            raise LoadError(f"checkpoint is missing tensor {key!r}")
        src = state[key]
        dst = val.data if isinstance(val, Tensor) else val
        if tuple(src.shape) != tuple(dst.shape):
            raise LoadError(f"tensor {key!r}: checkpoint shape {tuple(src.shape)} vs model {tuple(dst.shape)}")
        dst[...] = src.astype(dst.dtype)


def trainable(model) -> list[Tensor]:
    return [p for _, p in model.named_params("") if p.requires_grad]
