"""Autoregressive decoding: greedy and beam search over cached state.

A DecodeSession runs the encoder once, pre-projects the cross-attention
keys and values, and then advances one token per call on plain numpy
arrays: each step projects only the newest position, appends to per-layer
key/value caches, and rolls the relational memory forward.  The arithmetic
mirrors the teacher-forced path and a parity test holds the two together.

Rows of the session state are hypotheses; beam search reorders them by
passing parent indices, which the prefix property of the memory rollout
makes safe.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import tensor as T
from .errors import ContractError
from .memory import MemoryState
from .tensor import Tensor


@dataclass
class Hypothesis:
    """One decoded candidate.

    `tokens` never includes BOS or EOS; `logp` does include the EOS step
    for finished hypotheses, so candidates compete on full sequence
    probability.  `memory` is the slot state after the longest prefix the
    session actually consumed (everything for finished hypotheses, one
    token short for those cut at max_len), None for the memoryless mode.
    """

    tokens: tuple
    logp: float
    memory: object
    finished: bool


@dataclass
class SessionState:
    """Caches for `step` consumed tokens, one row per live hypothesis."""

    step: int
    kcache: list
    vcache: list
    memory: object


class DecodeSession:
    """Single-image incremental decoder sharing weights with the model."""

    def __init__(self, model, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[0] != 1:
            raise ContractError(f"a session decodes one image; got features {feats.shape}")
        self.model = model
        with T.no_grad():
            self.enc = model.encode(Tensor(feats)).hidden.data
        d = model.d
        h = model.n_heads
        self.dk = d // h
        src = self.enc.reshape(-1, d)
        self.cross_kv = []
        for lay in model.dec_layers:
            kc = (src @ lay.cross_attn.wk.data).reshape(-1, h, self.dk)
            vc = (src @ lay.cross_attn.wv.data).reshape(-1, h, self.dk)
            self.cross_kv.append((np.ascontiguousarray(kc.transpose(1, 0, 2)),
                                  np.ascontiguousarray(vc.transpose(1, 0, 2))))

    def _norm(self, lay, norm, x, m_flat):
        xhat, _ = K.layernorm_fwd(x, norm.eps)
        if lay.conditioned:
            gamma = norm.gamma.data + m_flat @ norm.gamma_mlp.w.data + norm.gamma_mlp.b.data
            beta = norm.beta.data + m_flat @ norm.beta_mlp.w.data + norm.beta_mlp.b.data
        else:
            gamma, beta = norm.gamma.data, norm.beta.data
        return gamma * xhat + beta

    def advance(self, state, tokens, parents=None):
        """Feed one token per hypothesis; returns (new_state, logits (n, V)).

        `parents[i]` selects the state row hypothesis i descends from; None
        means rows map one-to-one (required when state is None).
        """
        model = self.model
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.size
        if tokens.min() < 0 or tokens.max() >= model.vocab_size:
            raise ContractError(f"token id out of range for vocabulary {model.vocab_size}")
        d, h, dk = model.d, model.n_heads, self.dk
        n_lay = len(model.dec_layers)

        if state is None:
            t_prev = 0
            kprev = [np.zeros((n, h, 0, dk)) for _ in range(n_lay)]
            vprev = [np.zeros((n, h, 0, dk)) for _ in range(n_lay)]
            m_prev = None
            if model.rm is not None:
                m_prev = np.repeat(model.rm.m0.data[None], n, axis=0)
        else:
            t_prev = state.step
            if parents is None:
                parents = np.arange(n)
            parents = np.asarray(parents, dtype=np.int64)
            kprev = [kc[parents] for kc in state.kcache]
            vprev = [vc[parents] for vc in state.vcache]
            m_prev = None if state.memory is None else state.memory[parents]
        if t_prev + 1 > model.max_len:
            raise ContractError(f"decode ran past max_len {model.max_len}")

        y = model.embed.data[tokens]
        m_flat = None
        memory = None
        if model.rm is not None:
            memory = model.rm.step_arrays(m_prev, y)
            m_flat = memory.reshape(n, -1)

        x = y + model.positions[t_prev]
        scale = 1.0 / np.sqrt(dk)
        kcache, vcache = [], []
        for li, lay in enumerate(model.dec_layers):
            att = lay.self_attn
            q = (x @ att.wq.data).reshape(n, h, 1, dk)
            kn = (x @ att.wk.data).reshape(n, 1, h, dk).transpose(0, 2, 1, 3)
            vn = (x @ att.wv.data).reshape(n, 1, h, dk).transpose(0, 2, 1, 3)
            kc = np.concatenate([kprev[li], kn], axis=2)
            vc = np.concatenate([vprev[li], vn], axis=2)
            kcache.append(kc)
            vcache.append(vc)
            a = q @ kc.swapaxes(2, 3)
            a *= scale
            p = K.softmax_fwd(np.ascontiguousarray(a.reshape(-1, t_prev + 1)))
            z = (p.reshape(n, h, 1, t_prev + 1) @ vc).transpose(0, 2, 1, 3).reshape(n, d)
            x = self._norm(lay, lay.norm1, x + (z @ att.out.w.data + att.out.b.data), m_flat)

            att = lay.cross_attn
            ck, cv = self.cross_kv[li]
            s_src = ck.shape[1]
            q = (x @ att.wq.data).reshape(n, h, 1, dk)
            a = q @ ck.swapaxes(1, 2)[None]
            a *= scale
            p = K.softmax_fwd(np.ascontiguousarray(a.reshape(-1, s_src)))
            z = (p.reshape(n, h, 1, s_src) @ cv[None]).transpose(0, 2, 1, 3).reshape(n, d)
            x = self._norm(lay, lay.norm2, x + (z @ att.out.w.data + att.out.b.data), m_flat)

            ff = np.maximum(x @ lay.ff.lin1.w.data + lay.ff.lin1.b.data, 0.0)
            ff = ff @ lay.ff.lin2.w.data + lay.ff.lin2.b.data
            x = self._norm(lay, lay.norm3, x + ff, m_flat)

        if model.mode == "base+rm":
            x = np.concatenate([x, m_flat], axis=-1)
        logits = x @ model.out_proj.w.data + model.out_proj.b.data
        return SessionState(t_prev + 1, kcache, vcache, memory), logits


def log_probs(logits):
    """Row-wise log softmax."""
    _, lse = K.softmax_lse_fwd(np.ascontiguousarray(logits))
    return logits - lse[:, None]


def _blocked(model):
    """Ids never emitted: padding and the start marker."""
    return (model.pad_id, model.bos_id)


def greedy_decode(model, feats, max_len=None):
    """Argmax decoding; stops at EOS or after max_len tokens.

    Kept as its own loop rather than beam_search(beam=1) so the two can be
    checked against each other.
    """
    max_len = model.max_len if max_len is None else max_len
    if max_len < 1:
        raise ContractError(f"max_len must be positive, got {max_len}")
    session = DecodeSession(model, feats)
    state = None
    feed = np.array([model.bos_id])
    out = []
    for _ in range(max_len):
        state, logits = session.advance(state, feed, [0])
        lp = log_probs(logits)[0]
        lp[list(_blocked(model))] = -np.inf
        w = int(np.argmax(lp))
        if w == model.eos_id:
            break
        out.append(w)
        feed = np.array([w])
    return out


def beam_search(model, feats, beam, max_len=None, length_norm=False):
    """Ranked hypotheses by cumulative log-probability.

    Each step ranks every expansion of the frontier and keeps the best
    `beam`; an expansion by EOS freezes its hypothesis into a finished
    pool, the rest form the next frontier.  Hypotheses still open at
    max_len compete with their prefix score.  Ties break toward the
    higher score, then the earlier finish, then lexicographic tokens.

    With length_norm the final ranking divides each score by the number
    of summed log-probabilities; expansion is unaffected, and the early
    exit is disabled since the normalized score is not monotone.
    """
    if beam < 1:
        raise ContractError(f"beam width must be at least 1, got {beam}")
    max_len = model.max_len if max_len is None else max_len
    if max_len < 1:
        raise ContractError(f"max_len must be positive, got {max_len}")
    session = DecodeSession(model, feats)
    blocked = _blocked(model)

    state = None
    frontier = [Hypothesis(tokens=(), logp=0.0, memory=None, finished=False)]
    feed = [model.bos_id]
    parents = [0]
    pool = []
    vocab = model.vocab_size
    for _ in range(max_len):
        state, logits = session.advance(state, feed, parents)
        lp = log_probs(logits)
        if state.memory is not None:
            for i, hyp in enumerate(frontier):
                hyp.memory = MemoryState(matrix=state.memory[i].copy(), step=state.step)

        n = len(frontier)
        scores = np.array([h.logp for h in frontier])[:, None] + lp
        scores[:, list(blocked)] = -np.inf

        # global top-beam expansions ordered by (-score, parent, token)
        flat = scores.ravel()
        rows = np.repeat(np.arange(n), vocab)
        cols = np.tile(np.arange(vocab), n)
        order = np.lexsort((cols, rows, -flat))
        nxt = []
        feed, parents = [], []
        for j in order[:beam]:
            if not np.isfinite(flat[j]):
                continue
            src = frontier[rows[j]]
            w = int(cols[j])
            if w == model.eos_id:
                pool.append(Hypothesis(tokens=src.tokens, logp=flat[j],
                                       memory=src.memory, finished=True))
            else:
                nxt.append(Hypothesis(tokens=src.tokens + (w,), logp=flat[j],
                                      memory=src.memory, finished=False))
                feed.append(w)
                parents.append(int(rows[j]))
        frontier = nxt
        if not frontier:
            break
        if not length_norm and len(pool) >= beam:
            floor = sorted(pool, key=_rank_key)[beam - 1].logp
            if max(h.logp for h in frontier) <= floor:
                break

    ranked = sorted(pool + frontier, key=_norm_rank_key if length_norm else _rank_key)
    return ranked[:beam]


def _rank_key(hyp):
    return (-hyp.logp, len(hyp.tokens), hyp.tokens)


def _norm_rank_key(hyp):
    steps = len(hyp.tokens) + (1 if hyp.finished else 0)
    return (-hyp.logp / max(steps, 1), len(hyp.tokens), hyp.tokens)
