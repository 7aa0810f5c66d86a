"""Encoder-decoder transformer over patch features with a memory-driven decoder.

Three variants share this class, selected by `mode`:

  base           plain transformer, no memory anywhere
  base+rm        memory rolled out over the shifted target and concatenated
                 to the final decoder hidden state before the (widened)
                 output projection
  base+rm+mcln   the full model: the rollout additionally conditions all
                 three layer norms of every decoder layer

The decoder is post-norm: sublayer, residual add, then normalization; the
output of the first norm is the query for cross-attention.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .mcln import make_norm
from .memory import RelationalMemory
from .nn import (FeedForward, LayerNorm, Linear, Module, MultiHeadAttention,
                 causal_mask, sinusoidal_positions)
from .tensor import Tensor

MODES = ("base", "base+rm", "base+rm+mcln")


@dataclass
class EncodedImage:
    """Per-patch encoder hidden states, shape (B, S, d)."""

    hidden: Tensor

    @property
    def source_len(self):
        return self.hidden.shape[1]


class EncoderLayer(Module):
    def __init__(self, d, n_heads, rng):
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.norm1 = LayerNorm(d)
        self.ff = FeedForward(d, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x):
        x = self.norm1(x + self.attn(x, x))
        return self.norm2(x + self.ff(x))


class DecoderLayer(Module):
    """Masked self-attention, cross-attention, feed-forward, post-norms.

    When `conditioned`, the three norms read the per-position flattened
    memory; otherwise they are plain layer norms and m_flat is ignored.
    """

    def __init__(self, d, n_heads, n_slots, rng, conditioned):
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm1 = make_norm(d, n_slots, rng, conditioned)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.norm2 = make_norm(d, n_slots, rng, conditioned)
        self.ff = FeedForward(d, rng)
        self.norm3 = make_norm(d, n_slots, rng, conditioned)
        self.conditioned = conditioned

    def _norm(self, norm, x, m_flat):
        return norm(x, m_flat) if self.conditioned else norm(x)

    def __call__(self, x, enc_hidden, mask, m_flat=None, cross_probs=None):
        x = self._norm(self.norm1, x + self.self_attn(x, x, mask=mask), m_flat)
        x = self._norm(self.norm2, x + self.cross_attn(x, enc_hidden, probs_out=cross_probs), m_flat)
        return self._norm(self.norm3, x + self.ff(x), m_flat)


class ReportModel(Module):
    """Patch-features-to-token-sequence model with optional relational memory."""

    def __init__(self, vocab_size, d=64, n_heads=8, n_enc=3, n_dec=3, n_slots=3,
                 d_feat=128, max_len=100, mode="base+rm+mcln", seed=0,
                 pad_id=0, bos_id=1, eos_id=2):
        if mode not in MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
        if vocab_size < 4:
            raise ConfigError(f"vocabulary size {vocab_size} too small (need specials plus content)")
        if d % n_heads:
            raise ConfigError(f"model width {d} not divisible by {n_heads} heads")
        rng = np.random.default_rng(seed)
        std = d ** -0.5
        self.embed = Tensor(rng.normal(0.0, std, size=(vocab_size, d)), requires_grad=True)
        self.proj = Linear(d_feat, d, rng)
        self.enc_layers = [EncoderLayer(d, n_heads, rng) for _ in range(n_enc)]
        conditioned = mode == "base+rm+mcln"
        self.dec_layers = [DecoderLayer(d, n_heads, n_slots, rng, conditioned)
                           for _ in range(n_dec)]
        self.rm = RelationalMemory(d, n_heads, n_slots, rng) if mode != "base" else None
        out_in = d + n_slots * d if mode == "base+rm" else d
        self.out_proj = Linear(out_in, vocab_size, rng)
        self.positions = sinusoidal_positions(max_len + 1, d)
        self.vocab_size = vocab_size
        self.d = d
        self.n_heads = n_heads
        self.n_slots = n_slots
        self.d_feat = d_feat
        self.max_len = max_len
        self.mode = mode
        self.pad_id = pad_id
        self.bos_id = bos_id
        self.eos_id = eos_id

    # -- encoder side --------------------------------------------------------

    def project_features(self, feats):
        """Affine per-patch projection to model width; patches are a set, no positions."""
        if not isinstance(feats, Tensor):
            feats = Tensor(feats)
        if feats.shape[-1] != self.d_feat:
            raise ShapeError(f"feature width {feats.shape[-1]} != configured d_feat {self.d_feat}")
        return self.proj(feats)

    def encode(self, feats):
        x = self.project_features(feats)
        for layer in self.enc_layers:
            x = layer(x)
        return EncodedImage(hidden=x)

    # -- decoder side --------------------------------------------------------

    def shift_targets(self, targets):
        """BOS-prefixed decoder input: position t holds the token before target t."""
        ids = np.asarray(targets, dtype=np.int64)
        if ids.ndim != 2:
            raise ContractError(f"targets must be (batch, steps), got shape {ids.shape}")
        bos = np.full((ids.shape[0], 1), self.bos_id, dtype=np.int64)
        return np.concatenate([bos, ids[:, :-1]], axis=1)

    def memory_sequence(self, targets):
        """Flattened memory per decoder position, or None for the base variant.

        The rollout consumes the shifted target embeddings without positional
        encoding, so M_t never sees the token position t must predict.
        """
        if self.rm is None:
            return None
        ids_in = self.shift_targets(targets)
        return self.rm.rollout(T.embedding(self.embed, ids_in))

    def decode_teacher_forced(self, enc, targets, memory_seq=None, cross_probs=None):
        """Logits (B, T, V) for every target position in parallel."""
        ids_in = self.shift_targets(targets)
        b, t_len = ids_in.shape
        if t_len > self.max_len:
            raise ContractError(f"sequence length {t_len} exceeds max_len {self.max_len}")
        if self.rm is not None:
            if memory_seq is None:
                raise ContractError(f"mode {self.mode!r} requires a memory sequence")
            if memory_seq.shape[:2] != (b, t_len):
                raise ContractError(
                    f"memory sequence shape {memory_seq.shape[:2]} != targets shape {(b, t_len)}")
        x = T.embedding(self.embed, ids_in) + self.positions[:t_len]
        mask = causal_mask(t_len)
        for layer in self.dec_layers:
            x = layer(x, enc.hidden, mask, memory_seq, cross_probs)
        if self.mode == "base+rm":
            x = T.concat([x, memory_seq], axis=-1)
        return self.out_proj(x)

    def loss(self, feats, targets):
        enc = self.encode(feats)
        logits = self.decode_teacher_forced(enc, targets, self.memory_sequence(targets))
        return nll_loss(logits, targets, self.pad_id)

    def attention_weights(self, enc, prefix_ids):
        """Cross-attention probability maps while decoding a given prefix.

        Returns one (n_heads, len(prefix), S) array per decoder layer; row t
        is the distribution used when producing prefix token t, and rows sum
        to one.
        """
        if len(prefix_ids) == 0:
            raise ContractError("attention weights need at least one decoded token")
        ids = np.asarray([list(prefix_ids)], dtype=np.int64)
        probs = []
        with T.no_grad():
            self.decode_teacher_forced(enc, ids, self.memory_sequence(ids), cross_probs=probs)
        return probs


def nll_loss(logits, targets, pad_id):
    """Mean negative log-likelihood over non-pad target positions."""
    targets = np.asarray(targets)
    b, t_len, v = logits.shape
    if targets.shape != (b, t_len):
        raise ContractError(f"targets shape {targets.shape} != logits shape {(b, t_len)}")
    flat = T.reshape(logits, (b * t_len, v))
    ids = np.ascontiguousarray(targets.reshape(-1), dtype=np.int64)
    lse = T.logsumexp_rows(flat)
    picked = T.gather_rows(flat, ids)
    mask = (ids != pad_id).astype(np.float64)
    n_real = mask.sum()
    if n_real == 0:
        raise ContractError("every target position is padding")
    return T.sum_all((lse - picked) * mask) * (1.0 / n_real)
