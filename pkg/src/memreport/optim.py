"""Adam with bias correction over named parameter collections.

Training uses two instances (the feature projector gets its own learning
rate), each owning disjoint parameters.  Moments live in flat float64
buffers aligned with each parameter's raveled data; the update itself is a
fused kernel.
"""

import numpy as np

from . import _kernels as K
from .errors import ContractError


class AdamState:
    """First/second moment buffers plus the step counter for one group."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = {name: np.zeros(p.data.size) for name, p in self.params.items()}
        self.v = {name: np.zeros(p.data.size) for name, p in self.params.items()}

    def state_arrays(self):
        """Flat views for checkpointing, keyed by parameter name."""
        return self.m, self.v


def adam_step(state):
    """Apply one Adam update to every parameter in the group.

    A parameter with no gradient is a contract violation: it means backward
    was not run (or the parameter is not part of the loss graph), and
    silently skipping it would hide wiring bugs.
    """
    state.step_count += 1
    t = state.step_count
    for name, p in state.params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient; run backward() first")
        g = np.ascontiguousarray(p.grad.reshape(-1))
        K.adam_update(p.data.reshape(-1), g, state.m[name], state.v[name],
                      state.lr, state.beta1, state.beta2, state.eps, t)
