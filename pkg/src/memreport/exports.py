"""Analysis artifacts: cross-attention maps and length histograms.

Both writers are pure functions of their inputs serialized with sorted keys,
so re-exporting the same state produces byte-identical files.
"""

import json

import numpy as np

from .errors import ContractError
from .generate import greedy_decode, beam_search
from .metrics import length_histogram

HIST_BIN_STARTS = list(range(0, 101, 10))


def attention_export(model, vocab, sample_id, feats, beam=3):
    """First-decoder-layer cross-attention for the decoded report, one row
    per generated token."""
    if beam == 1:
        tokens = greedy_decode(model, feats)
    else:
        tokens = list(beam_search(model, feats, beam)[0].tokens)
    if not tokens:
        raise ContractError(f"sample {sample_id}: decoded report is empty")
    x = np.asarray(feats, dtype=np.float64)
    enc = model.encode(x[None] if x.ndim == 2 else x)
    heads = model.attention_weights(enc, tokens)[0]
    return {
        "sample_id": int(sample_id),
        "tokens": vocab.decode(tokens),
        "patch_count": heads.shape[-1],
        "heads": heads.tolist(),
        "head_mean": heads.mean(axis=0).tolist(),
    }


def lengths_export(generations):
    """Token-length histograms of hypotheses and references, side by side."""
    return {
        "bin_starts": HIST_BIN_STARTS,
        "hypothesis": length_histogram([g["hypothesis"] for g in generations]).tolist(),
        "reference": length_histogram([g["reference"] for g in generations]).tolist(),
    }


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
