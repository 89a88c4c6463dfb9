"""Central-difference gradient checks for every differentiable op.

Fast development pass (a handful of trials per op); the acceptance suite
repeats the same catalog at 100 trials per op.
"""

import numpy as np
import pytest

from msx.gradcheck import max_rel_error

from conftest import OP_GRADCHECKS

TOL = 1e-4


@pytest.mark.parametrize("name", sorted(OP_GRADCHECKS))
def test_op_gradients_match_central_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(5):
        fn, inputs = OP_GRADCHECKS[name](rng)
        worst = max(worst, max_rel_error(fn, inputs))
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"
