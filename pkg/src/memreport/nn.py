"""Small parameter-module layer on top of the tensor core.

Modules hold Tensors and child modules as plain attributes; named_parameters
walks them in attribute insertion order, which keeps checkpoint layouts and
update order deterministic.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    """Parameter container with recursive named traversal."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((path, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(path))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}"))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    """Affine map on the last axis; weight is (d_in, d_out)."""

    def __init__(self, d_in, d_out, rng=None, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, d_in ** -0.5, size=(d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class LayerNorm(Module):
    """Per-position normalization over features with learned scale and shift."""

    def __init__(self, d, eps=1e-6):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return self.gamma * T.layer_normalize(x, self.eps) + self.beta


class MultiHeadAttention(Module):
    """Multi-head attention: fused q/k/v projections (no bias), output projection with bias."""

    def __init__(self, d, n_heads, rng):
        if d % n_heads:
            raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
        std = d ** -0.5
        self.wq = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.out = Linear(d, d, rng)
        self.n_heads = n_heads

    def __call__(self, xq, xkv, mask=None, probs_out=None):
        z = T.attend(xq, xkv, self.wq, self.wk, self.wv, self.n_heads,
                     mask=mask, probs_out=probs_out)
        return self.out(z)


class FeedForward(Module):
    """Position-wise two-layer relu network, hidden width 4d."""

    def __init__(self, d, rng):
        self.lin1 = Linear(d, 4 * d, rng)
        self.lin2 = Linear(4 * d, d, rng)

    def __call__(self, x):
        return self.lin2(T.relu(self.lin1(x)))


def sinusoidal_positions(n, d):
    """Fixed sin/cos position table of shape (n, d)."""
    pos = np.arange(n)[:, None].astype(np.float64)
    half = (d + 1) // 2
    freq = np.power(10000.0, -2.0 * np.arange(half) / d)
    angle = pos * freq[None, :]
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : d // 2])
    return out


def causal_mask(n):
    """Additive mask forbidding attention to later positions."""
    return np.triu(np.full((n, n), -1e30), k=1)
