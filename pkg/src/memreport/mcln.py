"""Layer normalization steered by the memory state.

Two independent affine maps read the flattened memory and predict offsets
on the learned scale and shift.  Both maps start at zero, so an untrained
module is bitwise a plain LayerNorm; that reduction is what lets the full
model collapse to a vanilla transformer at initialization.
"""

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

import numpy as np


class MemoryLayerNorm(Module):
    """LayerNorm whose gamma/beta receive memory-conditioned deltas."""

    def __init__(self, d, n_slots, rng, eps=1e-6):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.gamma_mlp = Linear(n_slots * d, d, zero_init=True)
        self.beta_mlp = Linear(n_slots * d, d, zero_init=True)
        self.eps = eps

    def __call__(self, x, m_flat):
        """x: (B, T, d); m_flat: (B, T, n_slots*d) aligned per position."""
        dg = self.gamma_mlp(m_flat)
        db = self.beta_mlp(m_flat)
        xhat = T.layer_normalize(x, self.eps)
        return (self.gamma + dg) * xhat + (self.beta + db)


def make_norm(d, n_slots, rng, conditioned, eps=1e-6):
    """Either a memory-conditioned norm or a plain one with the same eps."""
    if conditioned:
        return MemoryLayerNorm(d, n_slots, rng, eps)
    return LayerNorm(d, eps)
