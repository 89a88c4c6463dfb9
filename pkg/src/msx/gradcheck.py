"""Finite-difference gradient verification helpers.

Central differences with step 1e-5 against the recorded backward pass, at
float64. Inputs should be sampled away from kinks (relu zero crossings,
pooling ties) before checking; see the sampling helpers in the test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def max_rel_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    check_inputs: Sequence[int] | None = None,
) -> float:
    """Max relative error between backward grads and central differences.

    ``fn`` maps the given tensors to a scalar Tensor. Every coordinate of
    every checked input is perturbed by ±step. Relative error for one
    coordinate is |fd - an| / max(|fd|, |an|) with an absolute floor of 1e-7
    so that zero-gradient coordinates do not divide by zero.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradient checks must run at float64")
    idx = range(len(inputs)) if check_inputs is None else check_inputs
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for i in idx:
        t = inputs[i]
        an = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = fn(*inputs).item()
            flat[j] = orig - step
            lo = fn(*inputs).item()
            flat[j] = orig
            fd = (hi - lo) / (2 * step)
            err = abs(fd - an_flat[j])
            denom = max(abs(fd), abs(an_flat[j]))
            if err > 1e-7:
                worst = max(worst, err / max(denom, 1e-7))
    return worst


def coordinate_error(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
) -> float:
    """Relative error of one randomly chosen parameter coordinate of ``fn``.

    Whole-model variant: a full coordinate sweep is too slow, and perturbing
    every parameter at once pushes relu/pooling activations across their
    kinks, which invalidates the central difference. A single-coordinate
    step keeps the forward pass on one smooth piece.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient checks must run at float64")
        p.zero_grad()
    out = fn()
    out.backward()
    p = params[int(rng.integers(len(params)))]
    j = int(rng.integers(p.size))
    flat = p.data.reshape(-1)
    an = float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0
    orig = flat[j]
    flat[j] = orig + step
    hi = fn().item()
    flat[j] = orig - step
    lo = fn().item()
    flat[j] = orig
    fd = (hi - lo) / (2 * step)
    err = abs(fd - an)
    if err <= 1e-7:
        return 0.0
    return err / max(abs(fd), abs(an), 1e-7)
