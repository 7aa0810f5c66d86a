"""Relational memory carried across decoding steps.

A fixed number of slot rows is updated once per generated token: the slots
attend over themselves plus the last output token's embedding, a residual
MLP proposes new content, and learned forget/input gates blend it with the
old slots.  The same learned initial memory starts every sample.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class MemoryState:
    """Slot matrix after `step` updates; step 1 is the first post-BOS state."""

    matrix: np.ndarray
    step: int


def flatten_memory(matrix):
    """Row-major flatten of a slot matrix; reshape(S, d) inverts it."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ShapeError(f"memory matrix must be rank 2, got {m.shape}")
    return m.reshape(-1)


class RelationalMemory(Module):
    """Gated attention memory over n_slots rows of width d."""

    def __init__(self, d, n_heads, n_slots, rng):
        if d % n_heads:
            raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
        std = d ** -0.5
        self.wq = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.mlp1 = Linear(d, d, rng)
        self.mlp2 = Linear(d, d, rng)
        self.wf = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.uf = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.wi = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.ui = Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)
        self.m0 = Tensor(rng.normal(0.0, 0.1, size=(n_slots, d)), requires_grad=True)
        self.d = d
        self.n_heads = n_heads
        self.n_slots = n_slots

    def initial(self, batch):
        """Learned start state tiled to (batch, n_slots, d)."""
        return T.expand_leading(self.m0, batch)

    def attend_tokens(self, m_prev, y_prev):
        """Slots attend over [slots; last token]; no output projection.

        m_prev: (B, S, d); y_prev: (B, 1, d) -> (B, S, d).
        """
        if y_prev.shape[-1] != self.d:
            raise ShapeError(f"token embedding width {y_prev.shape[-1]} != memory width {self.d}")
        kv = T.concat_rows([m_prev, y_prev])
        return T.attend(m_prev, kv, self.wq, self.wk, self.wv, self.n_heads)

    def residual(self, z, m_prev):
        """MLP-refined update proposal with two skip paths."""
        s = z + m_prev
        return self.mlp2(T.relu(self.mlp1(s))) + s

    def gate_activations(self, m_prev, y_prev):
        """Forget and input gates; the token row is duplicated across slots by broadcast."""
        gf = T.sigmoid(T.matmul(y_prev, self.wf) + T.matmul(T.tanh(m_prev), self.uf))
        gi = T.sigmoid(T.matmul(y_prev, self.wi) + T.matmul(T.tanh(m_prev), self.ui))
        return gf, gi

    def gate(self, m_tilde, m_prev, y_prev):
        """Blend old slots with the squashed proposal."""
        gf, gi = self.gate_activations(m_prev, y_prev)
        return gf * m_prev + gi * T.tanh(m_tilde)

    def step(self, m_prev, y_prev):
        """One memory update from the previous output token's embedding."""
        z = self.attend_tokens(m_prev, y_prev)
        return self.gate(self.residual(z, m_prev), m_prev, y_prev)

    def rollout(self, y_embeds):
        """Flattened memory per decoder position.

        y_embeds: (B, T, d) embeddings of the shifted target (BOS first, no
        positional encoding).  Returns (B, T, n_slots*d) where position t
        holds the memory updated through input token t; the token predicted
        at t is never folded in, so the scan respects causality.

        This is a fused scan: one tape node for the whole rollout, with a
        hand-written backward that walks the steps in reverse.  The op-by-op
        path is kept as rollout_reference and the two are held to agree.
        """
        return _rollout_fused(self, y_embeds)

    def rollout_reference(self, y_embeds):
        """Definitional rollout as a plain composition of step()."""
        B, t_len, d = y_embeds.shape
        m = self.initial(B)
        flats = []
        for t in range(t_len):
            y = T.slice_axis(y_embeds, 1, t, t + 1)
            m = self.step(m, y)
            flats.append(T.reshape(m, (B, 1, self.n_slots * d)))
        return T.concat(flats, axis=1)

    def step_arrays(self, m, y):
        """One update on plain arrays: m (B, S, d), y (B, d) -> next m.

        Mirrors step() formula for formula; used by the cached decoding path
        where no tape is wanted.
        """
        B, S, d = m.shape
        H = self.n_heads
        dk = d // H
        kv = np.concatenate([m, y[:, None, :]], axis=1)
        m2 = m.reshape(-1, d)
        kv2 = kv.reshape(-1, d)
        q = (m2 @ self.wq.data).reshape(B, S, H, dk).transpose(0, 2, 1, 3)
        k = (kv2 @ self.wk.data).reshape(B, S + 1, H, dk).transpose(0, 2, 1, 3)
        v = (kv2 @ self.wv.data).reshape(B, S + 1, H, dk).transpose(0, 2, 1, 3)
        a = q @ k.swapaxes(2, 3)
        a *= 1.0 / np.sqrt(dk)
        p = K.softmax_fwd(np.ascontiguousarray(a.reshape(-1, S + 1))).reshape(B, H, S, S + 1)
        z = np.ascontiguousarray((p @ v).transpose(0, 2, 1, 3)).reshape(B, S, d)
        s = z + m
        s2 = s.reshape(-1, d)
        hr = np.maximum(s2 @ self.mlp1.w.data + self.mlp1.b.data, 0.0)
        mt = (hr @ self.mlp2.w.data + self.mlp2.b.data).reshape(B, S, d) + s
        tm2 = K.tanh_fwd(m).reshape(-1, d)
        gf = K.sigmoid_fwd((y @ self.wf.data)[:, None, :] + (tm2 @ self.uf.data).reshape(B, S, d))
        gi = K.sigmoid_fwd((y @ self.wi.data)[:, None, :] + (tm2 @ self.ui.data).reshape(B, S, d))
        return gf * m + gi * K.tanh_fwd(mt)

    def rollout_prefix(self, prefix_ids, embed_table, bos_id):
        """State snapshots after BOS then each prefix token.

        An empty prefix yields the single post-BOS state.  Ids are validated
        against the embedding table (unknown id or empty vocabulary raise).
        """
        ids = np.asarray([bos_id] + [int(i) for i in prefix_ids], dtype=np.int64)
        states = []
        with T.no_grad():
            embs = T.embedding(embed_table, ids[None, :])
            m = self.initial(1)
            for t in range(ids.size):
                m = self.step(m, T.slice_axis(embs, 1, t, t + 1))
                states.append(MemoryState(matrix=m.data[0].copy(), step=t + 1))
        return states


def _rollout_fused(rm, y_embeds):
    """Whole-sequence memory scan as a single tape node.

    Forward runs the same arithmetic as RelationalMemory.step on plain
    arrays, stashing per-step activations; backward walks the steps in
    reverse with a running carry on the memory grad.  Held to agree with
    rollout_reference by test, and with central differences by grad_check.
    """
    if y_embeds.data.ndim != 3 or y_embeds.data.shape[2] != rm.d:
        raise ShapeError(f"rollout input must be (B, T, {rm.d}), got {y_embeds.data.shape}")
    B, t_len, d = y_embeds.data.shape
    if t_len < 1:
        raise ContractError("rollout needs at least one step")
    S = rm.n_slots
    H = rm.n_heads
    dk = d // H
    scale = 1.0 / np.sqrt(dk)
    S1 = S + 1

    wq, wk, wv = rm.wq.data, rm.wk.data, rm.wv.data
    w1, b1 = rm.mlp1.w.data, rm.mlp1.b.data
    w2, b2 = rm.mlp2.w.data, rm.mlp2.b.data
    wf, uf = rm.wf.data, rm.uf.data
    wi, ui = rm.wi.data, rm.ui.data

    m = np.repeat(rm.m0.data[None, :, :], B, axis=0)
    out = np.empty((B, t_len, S * d))
    stash = []
    for t in range(t_len):
        y = y_embeds.data[:, t]
        kv2 = np.concatenate([m, y[:, None, :]], axis=1).reshape(-1, d)
        m2 = m.reshape(-1, d)
        q = (m2 @ wq).reshape(B, S, H, dk).transpose(0, 2, 1, 3)
        k = (kv2 @ wk).reshape(B, S1, H, dk).transpose(0, 2, 1, 3)
        v = (kv2 @ wv).reshape(B, S1, H, dk).transpose(0, 2, 1, 3)
        a = q @ k.swapaxes(2, 3)
        a *= scale
        p = K.softmax_fwd(np.ascontiguousarray(a.reshape(-1, S1))).reshape(B, H, S, S1)
        z = np.ascontiguousarray((p @ v).transpose(0, 2, 1, 3)).reshape(B, S, d)
        s = z + m
        hr = np.maximum(s.reshape(-1, d) @ w1 + b1, 0.0)
        mt = (hr @ w2 + b2).reshape(B, S, d) + s
        tm = K.tanh_fwd(m)
        gf = K.sigmoid_fwd((y @ wf)[:, None, :] + (tm.reshape(-1, d) @ uf).reshape(B, S, d))
        gi = K.sigmoid_fwd((y @ wi)[:, None, :] + (tm.reshape(-1, d) @ ui).reshape(B, S, d))
        tmt = K.tanh_fwd(mt)
        m_next = gf * m + gi * tmt
        stash.append((m, y, q, k, v, p, s, hr, tm, gf, gi, tmt))
        out[:, t] = m_next.reshape(B, -1)
        m = m_next

    def bwd(g):
        gwq = np.zeros_like(wq)
        gwk = np.zeros_like(wk)
        gwv = np.zeros_like(wv)
        gw1 = np.zeros_like(w1)
        gb1 = np.zeros_like(b1)
        gw2 = np.zeros_like(w2)
        gb2 = np.zeros_like(b2)
        gwf = np.zeros_like(wf)
        guf = np.zeros_like(uf)
        gwi = np.zeros_like(wi)
        gui = np.zeros_like(ui)
        g_y = np.zeros((B, t_len, d))
        gm = np.zeros((B, S, d))
        for t in range(t_len - 1, -1, -1):
            m, y, q, k, v, p, s, hr, tm, gf, gi, tmt = stash[t]
            gmn = g[:, t].reshape(B, S, d) + gm

            # m_next = gf*m + gi*tanh(mt); the forget leak seeds the new carry
            g_gf = gmn * m
            g_gi = gmn * tmt
            g_mt = (gmn * gi) * (1.0 - tmt * tmt)
            gm = gmn * gf

            # gates: sigmoid(y W + tanh(m) U), token row broadcast across slots
            g_af = g_gf * gf * (1.0 - gf)
            g_ai = g_gi * gi * (1.0 - gi)
            g_yf = g_af.sum(axis=1)
            g_yi = g_ai.sum(axis=1)
            gwf += y.T @ g_yf
            gwi += y.T @ g_yi
            gy = g_yf @ wf.T + g_yi @ wi.T
            g_af2 = g_af.reshape(-1, d)
            g_ai2 = g_ai.reshape(-1, d)
            tm2 = tm.reshape(-1, d)
            guf += tm2.T @ g_af2
            gui += tm2.T @ g_ai2
            g_tm = (g_af2 @ uf.T + g_ai2 @ ui.T).reshape(B, S, d)
            gm += g_tm * (1.0 - tm * tm)

            # proposal: mt = mlp2(relu(mlp1(s))) + s
            g_mt2 = g_mt.reshape(-1, d)
            g_s = g_mt.copy()
            g_hr = g_mt2 @ w2.T
            gw2 += hr.T @ g_mt2
            gb2 += g_mt2.sum(axis=0)
            g_h = g_hr * (hr > 0.0)
            g_s += (g_h @ w1.T).reshape(B, S, d)
            gw1 += s.reshape(-1, d).T @ g_h
            gb1 += g_h.sum(axis=0)

            # s = z + m
            gm += g_s

            # attention over [slots; token]
            gZ = g_s.reshape(B, S, H, dk).transpose(0, 2, 1, 3)
            gP = gZ @ v.swapaxes(2, 3)
            gV = p.swapaxes(2, 3) @ gZ
            gA = K.softmax_bwd(np.ascontiguousarray(p.reshape(-1, S1)),
                               np.ascontiguousarray(gP.reshape(-1, S1))).reshape(B, H, S, S1)
            gA *= scale
            gQ = gA @ k
            gK = gA.swapaxes(2, 3) @ q
            gq2 = np.ascontiguousarray(gQ.transpose(0, 2, 1, 3)).reshape(-1, d)
            gk2 = np.ascontiguousarray(gK.transpose(0, 2, 1, 3)).reshape(-1, d)
            gv2 = np.ascontiguousarray(gV.transpose(0, 2, 1, 3)).reshape(-1, d)
            kv2 = np.concatenate([m, y[:, None, :]], axis=1).reshape(-1, d)
            gwq += m.reshape(-1, d).T @ gq2
            gwk += kv2.T @ gk2
            gwv += kv2.T @ gv2
            gm += (gq2 @ wq.T).reshape(B, S, d)
            g_kv = (gk2 @ wk.T + gv2 @ wv.T).reshape(B, S1, d)
            gm += g_kv[:, :S]
            gy += g_kv[:, S]
            g_y[:, t] = gy
        return (g_y, gwq, gwk, gwv, gw1, gb1, gw2, gb2,
                gwf, guf, gwi, gui, gm.sum(axis=0))

    parents = (y_embeds, rm.wq, rm.wk, rm.wv, rm.mlp1.w, rm.mlp1.b,
               rm.mlp2.w, rm.mlp2.b, rm.wf, rm.uf, rm.wi, rm.ui, rm.m0)
    return T.primitive(out, parents, bwd)
