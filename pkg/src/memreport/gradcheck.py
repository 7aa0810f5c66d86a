"""Central-difference gradient verification.

Used by the test suite to validate every differentiable op and the composed
models.  The relative-error metric compares coordinatewise against
max(|analytic|, |numeric|, floor): the floor makes coordinates where both
gradients are tiny compare absolutely, so finite-difference noise on a true
zero does not register as disagreement.
"""

import numpy as np

from .errors import ContractError


def grad_check(f, params, eps=1e-5, floor=1e-6):
    """Worst relative error between analytic and numeric gradients.

    `f` builds the forward graph from scratch and returns a scalar Tensor;
    `params` are the leaf Tensors to probe.  Every coordinate of every
    parameter is perturbed by +/- eps.  A parameter that does not reach the
    loss has a zero analytic gradient and compares fine.
    """
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ContractError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().data)
            flat[i] = orig - eps
            lo = float(f().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(num), floor)
            worst = max(worst, abs(aflat[i] - num) / denom)
    return worst
