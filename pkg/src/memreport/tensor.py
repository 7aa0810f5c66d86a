"""Reverse-mode autodiff on dense float64 arrays of rank 0..3.

A Tensor wraps a numpy array plus an optional gradient.  Operations record
closures on a tape; Tensor.backward() walks the tape once in reverse
topological order.  Gradients are overwritten by each backward call, not
accumulated across calls: backward() first clears the grad of every node
reachable from the loss, then sums contributions within that single pass.
The tape of a consumed graph is released during backward, so a graph can be
backpropagated once; rebuild the forward pass for another pass.

Shapes follow numpy broadcasting for elementwise operations.  Reductions
and row-wise ops (softmax_rows, layer_normalize, logsumexp_rows) act on the
last axis.  Inputs with non-finite values are an error state; set
MEMREPORT_CHECK_FINITE=1 to assert finiteness after every op while
debugging.
"""

import os

import numpy as np

from . import _kernels as K
from .errors import ContractError, ShapeError

_CHECK_FINITE = bool(os.environ.get("MEMREPORT_CHECK_FINITE"))

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 3): shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        """Backpropagate from a scalar.

        Grads of every node reachable from this one are overwritten, never
        accumulated across calls; the graph itself is left intact, so calling
        backward again reproduces the same leaf grads.  Interior grads are
        scratch and are released as soon as they have been consumed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        for t in order:
            t.grad = None
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._bwd is None:
                continue
            grads = t._bwd(t.grad)
            for parent, g in zip(t._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g if g.shape == parent.data.shape else np.broadcast_to(g, parent.data.shape).copy()
                else:
                    parent.grad += g
            if t is not self:
                t.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powc(self, p)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- method sugar ------------------------------------------------------

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self):
        return sum_all(self)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
    # Iterative postorder DFS.  Nodes are marked expanded at pop time, not
    # push time; duplicate stack entries are skipped when popped.  Marking at
    # push time can order a node before one of its parents in diamond graphs.
    order = []
    expanded = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in expanded:
            continue
        expanded.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in expanded:
                stack.append((p, False))
    return order


def _make(data, parents, bwd):
    """Wrap an op result, recording the tape edge when grads are on."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError("non-finite value produced by a forward op")
    need = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def primitive(data, parents, bwd):
    """Record a hand-fused operation on the tape.

    `bwd` maps the upstream grad array to one grad array (or None) per
    parent.  This is the escape hatch used for composite steps whose op-by-op
    tape would be dominated by graph overhead; anything built on it must be
    covered by grad_check.
    """
    return _make(data, tuple(parents), bwd)


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise binaries --------------------------------------------------


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


def add(a, b):
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    _check_broadcast(a, b, "div")
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


# -- elementwise unaries ---------------------------------------------------


def powc(a, p):
    p = float(p)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.maximum(out, 1e-300),))


def tanh(a):
    out = K.tanh_fwd(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = K.sigmoid_fwd(np.ascontiguousarray(a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,))


# -- reductions ------------------------------------------------------------


def sum_all(a):
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def mean_last(a):
    """Mean over the last axis, kept as a size-1 axis."""
    n = a.data.shape[-1]
    out = a.data.mean(axis=-1, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def row_stats(a):
    """Per-row mean and population standard deviation over the last axis.

    Both come back with the reduced axis kept, so they broadcast against the
    input.  Differentiable through both outputs.
    """
    mu = mean_last(a)
    d = sub(a, mu)
    var = mean_last(mul(d, d))
    return mu, sqrt(var)


# -- structure -------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 3:
        raise ShapeError(f"reshape target rank {len(shape)} exceeds 3: {shape}")
    orig = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {orig} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T.copy(),))


def permute(a, axes):
    axes = tuple(axes)
    if a.data.ndim != len(axes):
        raise ShapeError(f"permute axes {axes} do not match shape {a.data.shape}")
    inv = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def slice_axis(a, axis, lo, hi):
    """a[..., lo:hi, ...] along `axis`. Gradient scatters back into zeros."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(lo, hi)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), bwd)


def concat(parts, axis):
    """Concatenate tensors along `axis`."""
    if not parts:
        raise ContractError("concat of zero tensors")
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _make(out, tuple(parts), bwd)


def concat_rows(parts):
    """Concatenate along the second-to-last axis (rows of row-major operands)."""
    return concat(parts, axis=-2)


def expand_leading(a, n):
    """Prepend a new leading axis of length n by repetition; grad sums it away."""
    if a.data.ndim >= 3:
        raise ShapeError(f"expand_leading would exceed rank 3 from shape {a.data.shape}")
    out = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),))


# -- matrix products -------------------------------------------------------


def matmul(a, b):
    """Matrix product covering 2D@2D, 3D@3D (batched) and 3D@2D (shared rhs)."""
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 2 and bd.ndim == 2:
        out = ad @ bd
        bwd = lambda g: (g @ bd.T, ad.T @ g)
    elif ad.ndim == 3 and bd.ndim == 2:
        out = ad @ bd

        def bwd(g):
            k = ad.shape[-1]
            n = bd.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return (g @ bd.T, gb)
    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul batch sizes disagree: {ad.shape} @ {bd.shape}")
        out = ad @ bd
        bwd = lambda g: (g @ bd.swapaxes(1, 2), ad.swapaxes(1, 2) @ g)
    else:
        raise ShapeError(f"matmul ranks unsupported: {ad.shape} @ {bd.shape}")
    return _make(out, (a, b), bwd)


# -- fused row-wise ops ----------------------------------------------------


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_rows(a):
    """Softmax over the last axis."""
    shape = a.data.shape
    p = K.softmax_fwd(_rows(a.data)).reshape(shape)

    def bwd(g):
        gx = K.softmax_bwd(_rows(p), _rows(g))
        return (gx.reshape(shape),)

    return _make(p, (a,), bwd)


def logsumexp_rows(a):
    """log(sum(exp(row))) over the last axis of a 2D tensor; returns rank 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects rank 2, got {a.data.shape}")
    p, lse = K.softmax_lse_fwd(np.ascontiguousarray(a.data))
    return _make(lse, (a,), lambda g: (g[:, None] * p,))


def gather_rows(a, idx):
    """Pick a[i, idx[i]] for each row i of a 2D tensor; returns rank 1."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects rank 2, got {a.data.shape}")
    idx = np.asarray(idx)
    n, m = a.data.shape
    if idx.shape != (n,):
        raise ShapeError(f"gather_rows index shape {idx.shape} does not match {n} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise ContractError(f"gather_rows index out of range [0, {m})")
    rows = np.arange(n)
    out = a.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return _make(out, (a,), bwd)


def embedding(table, ids):
    """Look up rows of a (V, d) table by an integer id array of rank 1 or 2."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got {table.data.shape}")
    v, d = table.data.shape
    if v == 0:
        raise ContractError("embedding table is empty")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ContractError(f"token id out of range [0, {v}): saw {int(ids.min())}..{int(ids.max())}")
    if ids.ndim > 2:
        raise ShapeError(f"embedding ids rank {ids.ndim} exceeds 2")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        K.scatter_add_rows(gt, np.ascontiguousarray(ids.reshape(-1), dtype=np.int64),
                           np.ascontiguousarray(g.reshape(-1, d)))
        return (gt,)

    return _make(out, (table,), bwd)


def layer_normalize(a, eps=1e-6):
    """Normalize the last axis to zero mean and unit population std.

    The denominator is sigma + eps, so constant rows map to exactly zero.
    """
    shape = a.data.shape
    xhat, sigma = K.layernorm_fwd(_rows(a.data), eps)

    def bwd(g):
        gx = K.layernorm_bwd(xhat, sigma, _rows(g), eps)
        return (gx.reshape(shape),)

    return _make(xhat.reshape(shape), (a,), bwd)


def attend(xq, xkv, wq, wk, wv, n_heads, mask=None, probs_out=None):
    """Fused multi-head scaled dot-product attention.

    Projects xq with wq and xkv with wk/wv (no biases), splits heads, applies
    softmax(Q K^T / sqrt(dk) + mask) V per head, and merges heads back.  No
    output projection.  `mask` is an additive (Tq, Tk) array recorded as a
    constant.  When `probs_out` is a list, the (H, Tq, Tk) probabilities of
    each batch element are appended to it as plain arrays.

    Internally uses rank-4 numpy scratch; graph endpoints stay rank 3.
    """
    B, Tq, d = xq.data.shape
    Tk = xkv.data.shape[1]
    if xkv.data.shape[0] != B or xkv.data.shape[2] != d:
        raise ShapeError(f"attend operands disagree: {xq.data.shape} vs {xkv.data.shape}")
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    scale = 1.0 / np.sqrt(dk)

    xq2 = xq.data.reshape(-1, d)
    xkv2 = xkv.data.reshape(-1, d)
    Q = (xq2 @ wq.data).reshape(B, Tq, n_heads, dk).transpose(0, 2, 1, 3)
    Kh = (xkv2 @ wk.data).reshape(B, Tk, n_heads, dk).transpose(0, 2, 1, 3)
    Vh = (xkv2 @ wv.data).reshape(B, Tk, n_heads, dk).transpose(0, 2, 1, 3)
    S = Q @ Kh.swapaxes(2, 3)
    S *= scale
    if mask is not None:
        S += mask
    P = K.softmax_fwd(np.ascontiguousarray(S.reshape(-1, Tk))).reshape(B, n_heads, Tq, Tk)
    if probs_out is not None:
        for b in range(B):
            probs_out.append(P[b].copy())
    Z = P @ Vh
    out = np.ascontiguousarray(Z.transpose(0, 2, 1, 3)).reshape(B, Tq, d)

    def bwd(g):
        gZ = g.reshape(B, Tq, n_heads, dk).transpose(0, 2, 1, 3)
        gP = gZ @ Vh.swapaxes(2, 3)
        gV = P.swapaxes(2, 3) @ gZ
        gS = K.softmax_bwd(np.ascontiguousarray(P.reshape(-1, Tk)),
                           np.ascontiguousarray(gP.reshape(-1, Tk))).reshape(B, n_heads, Tq, Tk)
        gS *= scale
        gQ = gS @ Kh
        gK = gS.swapaxes(2, 3) @ Q
        gq2 = np.ascontiguousarray(gQ.transpose(0, 2, 1, 3)).reshape(-1, d)
        gk2 = np.ascontiguousarray(gK.transpose(0, 2, 1, 3)).reshape(-1, d)
        gv2 = np.ascontiguousarray(gV.transpose(0, 2, 1, 3)).reshape(-1, d)
        g_xq = (gq2 @ wq.data.T).reshape(B, Tq, d)
        g_xkv = (gk2 @ wk.data.T + gv2 @ wv.data.T).reshape(B, Tk, d)
        return (g_xq, g_xkv, xq2.T @ gq2, xkv2.T @ gk2, xkv2.T @ gv2)

    return _make(out, (xq, xkv, wq, wk, wv), bwd)
