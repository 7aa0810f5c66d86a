"""Memory-conditioned layer normalization."""

import numpy as np

from memreport import tensor as T
from memreport.gradcheck import grad_check
from memreport.mcln import MemoryLayerNorm
from memreport.memory import flatten_memory
from memreport.nn import LayerNorm
from memreport.tensor import Tensor


def test_flatten_memory_definition_and_roundtrip():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    flat = flatten_memory(m)
    assert np.array_equal(flat, [1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(flat.reshape(2, 2), m)
    for slots in range(1, 5):
        assert flatten_memory(np.zeros((slots, 6))).shape == (slots * 6,)


def test_zero_initialized_module_is_plain_layernorm_bitwise():
    d, slots = 8, 3
    rng = np.random.default_rng(0)
    mcln = MemoryLayerNorm(d, slots, rng)
    plain = LayerNorm(d)
    x = Tensor(rng.normal(size=(2, 4, d)) * 3)
    m = Tensor(rng.normal(size=(2, 4, slots * d)))
    a = mcln(x, m)
    b = plain(x)
    assert np.array_equal(a.data, b.data)


def test_constant_input_returns_shift_exactly():
    d, slots = 6, 2
    rng = np.random.default_rng(1)
    mcln = MemoryLayerNorm(d, slots, rng)
    mcln.beta_mlp.w.data[:] = rng.normal(size=(slots * d, d))
    mcln.beta_mlp.b.data[:] = rng.normal(size=d)
    x = Tensor(np.full((1, 3, d), 4.2))
    m = Tensor(rng.normal(size=(1, 3, slots * d)))
    out = mcln(x, m)
    shift = mcln.beta.data + (m.data @ mcln.beta_mlp.w.data + mcln.beta_mlp.b.data)
    assert np.array_equal(out.data, shift)


def test_hand_case_two_features():
    # r=[1,3], effective gamma [2,2], beta [1,1]: mu=2 sigma=1 -> [-1, 3]
    mcln = MemoryLayerNorm(2, 1, np.random.default_rng(2))
    mcln.gamma.data[:] = 2.0
    mcln.beta.data[:] = 1.0
    out = mcln(Tensor(np.array([[[1.0, 3.0]]])), Tensor(np.zeros((1, 1, 2))))
    assert np.allclose(out.data[0, 0], [-1.0, 3.0], atol=1e-5)


def test_identity_gamma_beta_normalizes():
    d, slots = 16, 3
    rng = np.random.default_rng(3)
    mcln = MemoryLayerNorm(d, slots, rng)
    x = Tensor(rng.normal(size=(3, 5, d)) * 2 + 1)
    m = Tensor(rng.normal(size=(3, 5, slots * d)))
    out = mcln(x, m).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-9
    assert np.abs(out.std(axis=-1) - 1.0).max() <= 1e-4


def test_conditioning_maps_share_nothing():
    mcln = MemoryLayerNorm(4, 2, np.random.default_rng(4))
    names = dict(mcln.named_parameters())
    assert names["gamma_mlp.w"] is not names["beta_mlp.w"]
    assert names["gamma_mlp.b"] is not names["beta_mlp.b"]
    mcln.gamma_mlp.w.data[:] = 7.0
    assert not np.array_equal(mcln.gamma_mlp.w.data, mcln.beta_mlp.w.data)


def test_grads_reach_base_and_conditioning():
    d, slots = 4, 2
    rng = np.random.default_rng(5)
    mcln = MemoryLayerNorm(d, slots, rng)
    mcln.gamma_mlp.w.data[:] = rng.normal(size=(slots * d, d)) * 0.1
    mcln.beta_mlp.w.data[:] = rng.normal(size=(slots * d, d)) * 0.1
    x = Tensor(rng.normal(size=(2, 3, d)), requires_grad=True)
    m = Tensor(rng.normal(size=(2, 3, slots * d)), requires_grad=True)
    w = rng.normal(size=(2, 3, d))

    def f():
        return T.sum_all(mcln(x, m) * w)

    params = [p for _, p in mcln.named_parameters()] + [x, m]
    assert grad_check(f, params) <= 1e-4
