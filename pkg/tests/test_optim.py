"""Adam update semantics."""

import numpy as np
import pytest

from memreport.errors import ContractError
from memreport.optim import AdamState, adam_step
from memreport.tensor import Tensor


def test_single_step_matches_reference_formula():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.5, -0.1, 2.0])
    state = AdamState({"p": p}, lr=0.1)
    before = p.data.copy()
    adam_step(state)

    g = np.array([0.5, -0.1, 2.0])
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = before - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-15)
    assert state.step_count == 1


def test_zero_gradient_is_fixed_point():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    start = p.data.copy()
    state = AdamState({"p": p}, lr=0.3)
    for _ in range(5):
        p.grad = np.zeros_like(p.data)
        adam_step(state)
    assert np.array_equal(p.data, start)


def test_missing_grad_raises():
    p = Tensor(np.ones(3), requires_grad=True)
    state = AdamState({"p": p}, lr=0.1)
    with pytest.raises(ContractError):
        adam_step(state)


def test_bad_lr_rejected():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        AdamState({"p": p}, lr=0.0)
