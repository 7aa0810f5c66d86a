"""Reference numpy implementations of the hot kernels.

These define the semantics; the compiled backend in cykernels.pyx mirrors
them operation for operation.  Everything works on C-contiguous float64
arrays.  Matrix products are deliberately absent: both backends lean on
BLAS through numpy for those.
"""

import numpy as np

BACKEND = "python"


def softmax_fwd(x):
    """Row softmax of a 2D array."""
    m = x.max(axis=1, keepdims=True)
    e = np.subtract(x, m)
    np.exp(e, out=e)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(p, g):
    """Gradient of row softmax given probabilities p and upstream grad g."""
    dot = (g * p).sum(axis=1, keepdims=True)
    return p * (g - dot)


def softmax_lse_fwd(x):
    """Row softmax plus the log-sum-exp of each row, sharing one pass."""
    m = x.max(axis=1, keepdims=True)
    e = np.subtract(x, m)
    np.exp(e, out=e)
    s = e.sum(axis=1, keepdims=True)
    lse = (np.log(s) + m).ravel()
    e /= s
    return e, lse


def layernorm_fwd(x, eps):
    """Row normalization. Returns (xhat, sigma) with sigma the population std."""
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    sigma = np.sqrt((d * d).mean(axis=1))
    xhat = d / (sigma[:, None] + eps)
    return xhat, sigma


def layernorm_bwd(xhat, sigma, g, eps):
    """Gradient of row normalization.

    With s = sigma + eps the per-row formula is
        gx = (g - mean(g)) / s - xhat * mean(g * xhat) / sigma
    and the second term vanishes identically for constant rows (xhat == 0),
    so sigma is floored only to dodge the 0/0.
    """
    s = sigma[:, None] + eps
    gm = g.mean(axis=1, keepdims=True)
    gx = (g - gm) / s
    proj = (g * xhat).mean(axis=1, keepdims=True)
    sig_safe = np.maximum(sigma[:, None], 1e-300)
    gx -= xhat * (proj / sig_safe)
    return gx


def sigmoid_fwd(x):
    """Elementwise logistic function, stable for large |x|."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_fwd(x):
    return np.tanh(x)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """One fused Adam step, in place on flat views of p, m and v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def scatter_add_rows(out, idx, g):
    """out[idx[i]] += g[i] with repeated indices accumulated."""
    np.add.at(out, idx, g)
