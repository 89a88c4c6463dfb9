"""Shared helpers: a catalog of gradient-check trial builders, one per op.

Each builder draws a random float64 trial (inputs sampled away from kinks
and ties so central differences are valid) and returns (fn, inputs) for
msx.gradcheck.max_rel_error.
"""

import numpy as np

from msx import tensor as T
from msx.tensor import BnStats, Tensor


def weighted(out, rng):
    """Reduce a tensor to a scalar with fixed random weights (mixes the grad)."""
    w = Tensor(rng.standard_normal(out.shape))
    return T.tsum(T.mul(out, w))


def away_from_zero(rng, shape, margin=0.05, scale=1.0):
    mag = rng.uniform(margin, scale, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def well_separated(rng, shape, gap=1e-3):
    """Values with all pairwise gaps > gap (no pooling ties under FD steps)."""
    n = int(np.prod(shape))
    vals = np.sort(rng.standard_normal(n) * 3)
    while np.min(np.diff(vals)) <= gap:
        vals = np.sort(rng.standard_normal(n) * 3)
    return rng.permutation(vals).reshape(shape)


def _matmul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    return lambda a, b: T.tsum(T.mul(T.matmul(a, b), Tensor(w))), [a, b]


def _bmm(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 4, 2)), requires_grad=True)
    w = rng.standard_normal((2, 3, 2))
    return lambda a, b: T.tsum(T.mul(T.bmm(a, b), Tensor(w))), [a, b]


def _lmatmul(rng):
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True)
    ww = rng.standard_normal((2, 3, 5))
    return lambda w, x: T.tsum(T.mul(T.lmatmul(w, x), Tensor(ww))), [w, x]


def _conv2d(rng):
    stride, padding, k = [(1, 0, 1), (1, 1, 3), (2, 1, 3)][rng.integers(3)]
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, k, k)), requires_grad=True)
    out_shape = T.conv2d(Tensor(x.data), Tensor(w.data), stride, padding).shape
    ww = rng.standard_normal(out_shape)
    return lambda x, w: T.tsum(T.mul(T.conv2d(x, w, stride, padding), Tensor(ww))), [x, w]


def _maxpool(rng):
    window, stride, padding = [(2, None, 0), (3, 2, 1)][rng.integers(2)]
    x = Tensor(well_separated(rng, (2, 6, 6)), requires_grad=True)
    out_shape = T.maxpool2d(Tensor(x.data), window, stride, padding).shape
    w = rng.standard_normal(out_shape)
    return lambda x: T.tsum(T.mul(T.maxpool2d(x, window, stride, padding), Tensor(w))), [x]


def _upsample(rng):
    x = Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True)
    w = rng.standard_normal((2, 6, 6))
    return lambda x: T.tsum(T.mul(T.upsample2d(x, 2), Tensor(w))), [x]


def _relu(rng):
    x = Tensor(away_from_zero(rng, (3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda x: T.tsum(T.mul(T.relu(x), Tensor(w))), [x]


def _sigmoid(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda x: T.tsum(T.mul(T.sigmoid(x), Tensor(w))), [x]


def _softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w = rng.standard_normal((3, 5))
    return lambda x: T.tsum(T.mul(T.softmax(x), Tensor(w))), [x]


def _batchnorm_train(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((2, 3, 4, 4))
    stats = BnStats(3, dtype=np.float64)

    def fn(x, gamma, beta):
        return T.tsum(T.mul(T.batchnorm2d(x, gamma, beta, stats, training=True), Tensor(w)))

    return fn, [x, gamma, beta]


def _batchnorm_eval(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((2, 3, 4, 4))
    stats = BnStats(3, dtype=np.float64)
    stats.mean = rng.standard_normal(3)
    stats.var = rng.uniform(0.5, 2.0, 3)

    def fn(x, gamma, beta):
        return T.tsum(T.mul(T.batchnorm2d(x, gamma, beta, stats, training=False), Tensor(w)))

    return fn, [x, gamma, beta]


def _gap(rng):
    x = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
    w = rng.standard_normal(3)
    return lambda x: T.tsum(T.mul(T.gap(x), Tensor(w))), [x]


def _reshape(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal(12)
    return lambda x: T.tsum(T.mul(T.reshape(x, (12,)), Tensor(w))), [x]


def _transpose(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((4, 3))
    return lambda x: T.tsum(T.mul(T.transpose(x), Tensor(w))), [x]


def _concat(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((6, 3))
    return lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=0), Tensor(w))), [a, b]


def _add_broadcast(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4,)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda a, b: T.tsum(T.mul(T.add(a, b), Tensor(w))), [a, b]


def _sub(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda a, b: T.tsum(T.mul(T.sub(a, b), Tensor(w))), [a, b]


def _mul_broadcast(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    w = rng.standard_normal((2, 3, 4))
    return lambda a, b: T.tsum(T.mul(T.mul(a, b), Tensor(w))), [a, b]


def _div(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(away_from_zero(rng, (3, 4), margin=0.3, scale=2.0), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda a, b: T.tsum(T.mul(T.div(a, b), Tensor(w))), [a, b]


def _log(rng):
    x = Tensor(rng.uniform(0.1, 3.0, (3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda x: T.tsum(T.mul(T.log(x), Tensor(w))), [x]


def _clip(rng):
    vals = away_from_zero(rng, (3, 4), margin=0.05, scale=1.5)
    vals = vals[np.abs(np.abs(vals) - 0.8) > 0.02].copy()
    while vals.size < 6:
        vals = np.concatenate([vals, away_from_zero(rng, (6,), 0.05, 0.7)])
    x = Tensor(vals[:6].reshape(2, 3), requires_grad=True)
    w = rng.standard_normal((2, 3))
    return lambda x: T.tsum(T.mul(T.clip(x, -0.8, 0.8), Tensor(w))), [x]


def _sum(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda x: T.tsum(x), [x]


def _mean(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda x: T.tmean(x), [x]


def _bce_with_logits(rng):
    z = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    y = (rng.random((2, 4)) > 0.5).astype(float)
    return lambda z: T.bce_with_logits(z, y), [z]


OP_GRADCHECKS = {
    "matmul": _matmul,
    "bmm": _bmm,
    "lmatmul": _lmatmul,
    "conv2d": _conv2d,
    "maxpool2d": _maxpool,
    "upsample2d": _upsample,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "softmax": _softmax,
    "batchnorm2d_train": _batchnorm_train,
    "batchnorm2d_eval": _batchnorm_eval,
    "gap": _gap,
    "reshape": _reshape,
    "transpose": _transpose,
    "concat": _concat,
    "add": _add_broadcast,
    "sub": _sub,
    "mul": _mul_broadcast,
    "div": _div,
    "log": _log,
    "clip": _clip,
    "sum": _sum,
    "mean": _mean,
    "bce_with_logits": _bce_with_logits,
}
