"""Training loop and corpus evaluation.

Determinism is the whole game here: the epoch shuffle is derived from
(seed, epoch) instead of a carried RNG, learning rates are recomputed from
the epoch index instead of compounded in place, and checkpoints store raw
float64.  Together these make resuming from an epoch boundary bit-exact,
which the test suite checks by comparing loss logs and checkpoint bytes.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, restore_model, restore_optimizers, save_checkpoint
from .errors import ConfigError, DataError, DivergenceError, VocabMismatchError
from .generate import beam_search, greedy_decode
from .model import ReportModel
from .optim import AdamState, adam_step
from .syndata import load_samples, load_vocab

# resuming with any of these changed would silently fork the trajectory
_RESUME_KEYS = ("d", "n_heads", "n_enc", "n_dec", "n_slots", "d_feat", "max_len",
                "mode", "lr_visual", "lr_other", "lr_decay", "batch_size", "seed")


def encode_targets(vocab, samples, max_len):
    """(B, T) target ids, EOS-terminated, padded to the batch maximum."""
    rows = []
    for s in samples:
        ids = vocab.encode(s["report"].split()) + [vocab.eos_id]
        if len(ids) > max_len:
            raise DataError(f"sample {s['id']}: report needs {len(ids)} steps, "
                            f"max_len is {max_len}")
        rows.append(ids)
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def build_model(cfg, vocab):
    return ReportModel(len(vocab), d=cfg.d, n_heads=cfg.n_heads, n_enc=cfg.n_enc,
                       n_dec=cfg.n_dec, n_slots=cfg.n_slots, d_feat=cfg.d_feat,
                       max_len=cfg.max_len, mode=cfg.mode, seed=cfg.seed,
                       pad_id=vocab.pad_id, bos_id=vocab.bos_id, eos_id=vocab.eos_id)


def param_groups(model, cfg):
    """Feature projector at the lower rate, everything else at the higher."""
    named = model.named_parameters()
    vis = [(n, p) for n, p in named if n.startswith("proj.")]
    rest = [(n, p) for n, p in named if not n.startswith("proj.")]
    return [AdamState(vis, cfg.lr_visual), AdamState(rest, cfg.lr_other)]


def validation_bleu4(model, vocab, samples):
    refs, hyps = [], []
    for s in samples:
        tokens = greedy_decode(model, s["features"])
        hyps.append(" ".join(vocab.decode(tokens)))
        refs.append(s["report"])
    return metrics.bleu(hyps, refs)[3]


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list
    best_epoch: int
    best_bleu4: float


def train(cfg, resume=None, log=None):
    """Run the schedule; returns checkpoint paths and per-epoch history.

    ``resume`` takes a last.ckpt path and continues from its epoch boundary;
    the continued run's losses match an uninterrupted run bit for bit.
    """
    cfg.validate()
    data_dir = Path(cfg.data_dir)
    vocab = load_vocab(data_dir / "vocab.json")
    train_samples = load_samples(data_dir / "train.jsonl", cfg.d_feat)
    val_samples = load_samples(data_dir / "val.jsonl", cfg.d_feat)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is None:
        model = build_model(cfg, vocab)
        opts = param_groups(model, cfg)
        start_epoch, global_step = 0, 0
        best_bleu4, best_epoch = None, None
    else:
        ckpt = load_checkpoint(resume)
        saved_cfg = ckpt.manifest["extra"].get("run_config", {})
        drift = [k for k in _RESUME_KEYS if saved_cfg.get(k) != getattr(cfg, k)]
        if drift:
            raise ConfigError(f"resume config differs from checkpoint on: {', '.join(drift)}")
        model, ckpt_vocab = restore_model(ckpt)
        if ckpt_vocab.words != vocab.words:
            raise VocabMismatchError(
                f"checkpoint vocabulary ({len(ckpt_vocab)} words) does not match "
                f"dataset vocabulary ({len(vocab)} words)")
        opts = restore_optimizers(ckpt, model)
        start_epoch = ckpt.manifest["epoch"]
        global_step = ckpt.manifest["step"]
        best_bleu4 = ckpt.manifest["extra"].get("best_bleu4")
        best_epoch = ckpt.manifest["extra"].get("best_epoch")
        if start_epoch >= cfg.epochs:
            raise ConfigError(
                f"checkpoint already covers epoch {start_epoch} of {cfg.epochs}; "
                "raise epochs to continue training")

    cfg.to_file(out_dir / "config.json")
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    history = []
    with open(out_dir / "loss_log.jsonl", "a" if resume else "w") as logf:
        for epoch in range(start_epoch, cfg.epochs):
            scale = cfg.lr_decay ** epoch
            opts[0].lr = cfg.lr_visual * scale
            opts[1].lr = cfg.lr_other * scale
            perm = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_samples))
            losses = []
            for lo in range(0, len(perm), cfg.batch_size):
                batch = [train_samples[i] for i in perm[lo:lo + cfg.batch_size]]
                feats = np.stack([s["features"] for s in batch])
                targets = encode_targets(vocab, batch, cfg.max_len)
                loss = model.loss(feats, targets)
                value = float(loss.data)
                if not np.isfinite(value):
                    dump = out_dir / "diverged_batch.json"
                    with open(dump, "w") as fh:
                        json.dump({"epoch": epoch + 1, "step": global_step + 1,
                                   "loss": value, "sample_ids": [s["id"] for s in batch]},
                                  fh, indent=2)
                    raise DivergenceError(f"non-finite loss at epoch {epoch + 1} "
                                          f"step {global_step + 1}; batch dumped to {dump}")
                loss.backward()
                for opt in opts:
                    adam_step(opt)
                global_step += 1
                losses.append(value)
                logf.write(json.dumps({"kind": "batch", "epoch": epoch + 1,
                                       "step": global_step, "loss": value}) + "\n")
            val_bleu4 = validation_bleu4(model, vocab, val_samples)
            record = {"kind": "epoch", "epoch": epoch + 1,
                      "train_loss": float(np.mean(losses)), "val_bleu4": val_bleu4,
                      "lr_visual": opts[0].lr, "lr_other": opts[1].lr}
            history.append(record)
            logf.write(json.dumps(record) + "\n")
            logf.flush()
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs}  loss {record['train_loss']:.4f}  "
                    f"val bleu4 {val_bleu4:.4f}")
            if best_bleu4 is None or val_bleu4 > best_bleu4:
                best_bleu4, best_epoch = val_bleu4, epoch + 1
            # paths and epoch budget may legitimately change across resumes,
            # so only the trajectory-defining fields are frozen into the file
            extra = {"run_config": {k: getattr(cfg, k) for k in _RESUME_KEYS},
                     "best_bleu4": best_bleu4, "best_epoch": best_epoch}
            save_checkpoint(last_path, model, vocab, opts, epoch=epoch + 1,
                            step=global_step, extra=extra)
            if best_epoch == epoch + 1:
                save_checkpoint(best_path, model, vocab, opts, epoch=epoch + 1,
                                step=global_step, extra=extra)
    return TrainResult(best_path=best_path, last_path=last_path, history=history,
                       best_epoch=best_epoch, best_bleu4=best_bleu4)


def decode_corpus(model, vocab, samples, beam=3, length_norm=False):
    """Per-sample generations: id, reference, hypothesis, sequence score.

    beam=1 still goes through beam_search (equal to greedy by contract) so
    every hypothesis carries its cumulative log-probability.
    """
    gens = []
    for s in samples:
        hyp = beam_search(model, s["features"], beam, length_norm=length_norm)[0]
        gens.append({"id": s["id"], "reference": s["report"],
                     "hypothesis": " ".join(vocab.decode(hyp.tokens)),
                     "score": hyp.logp})
    return gens


def evaluate_model(model, vocab, samples, beam=3, length_norm=False, baseline=None,
                   baseline_name=None):
    """MetricsReport plus generations for one decoded corpus."""
    gens = decode_corpus(model, vocab, samples, beam, length_norm)
    hyps = [g["hypothesis"] for g in gens]
    refs = [g["reference"] for g in gens]
    nlg = metrics.nlg_metrics(hyps, refs)
    labels = metrics.label_efficacy(hyps, [s["labels"] for s in samples])
    report = metrics.MetricsReport(nlg=nlg, labels=labels,
                                   histogram=metrics.length_histogram(hyps))
    if baseline is not None:
        report.avg_delta = metrics.avg_delta(nlg, baseline)
        report.baseline_name = baseline_name
    return report, gens
