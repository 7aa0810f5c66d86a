"""Command line entry point.

Every failure surfaces as one categorized line on stderr and a stable exit
code taken from the exception class, so shell scripts and the test suite can
branch on outcomes without scraping tracebacks.
"""

import argparse
import json
import sys
import traceback
from pathlib import Path

from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig
from .errors import ConfigError, DataError, MemreportError, VocabMismatchError
from .experiments import run_memory_sweep
from .exports import attention_export, lengths_export, write_json
from .metrics import avg_delta
from .model import MODES
from .syndata import (DataConfig, generate_dataset, load_samples, load_vocab,
                      write_samples, write_vocab)
from .trainer import decode_corpus, evaluate_model, train

_CONFIG_FLAGS = ("d", "n_heads", "n_enc", "n_dec", "n_slots", "d_feat", "max_len",
                 "lr_visual", "lr_other", "lr_decay", "epochs", "batch_size",
                 "beam", "seed", "data_dir", "out_dir")


def _add_config_args(sub):
    sub.add_argument("--config", help="JSON run config; flags override its fields")
    for name in _CONFIG_FLAGS:
        flag = "--" + name.replace("_", "-")
        kind = type(getattr(RunConfig(), name))
        sub.add_argument(flag, type=kind, default=None)
    sub.add_argument("--mode", choices=MODES, default=None)
    sub.add_argument("--length-norm", action="store_const", const=True, default=None)


def _build_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {name: getattr(args, name) for name in _CONFIG_FLAGS}
    overrides["mode"] = args.mode
    overrides["length_norm"] = args.length_norm
    return cfg.with_overrides(**overrides)


def _load_model(path):
    model, vocab = restore_model(load_checkpoint(path))
    return model, vocab


def _check_dataset_vocab(data_path, vocab):
    """Dataset text must be expressible in the checkpoint vocabulary."""
    sidecar = Path(data_path).parent / "vocab.json"
    if sidecar.exists():
        other = load_vocab(sidecar)
        if other.words != vocab.words:
            raise VocabMismatchError(
                f"{sidecar} has {len(other)} words, checkpoint has {len(vocab)}; "
                "the model was trained on a different vocabulary")


def _oov_scan(samples, vocab):
    for s in samples:
        ids = vocab.encode(s["report"].split())
        if vocab.unk_id in ids:
            word = s["report"].split()[ids.index(vocab.unk_id)]
            raise VocabMismatchError(
                f"sample {s['id']}: reference word {word!r} is outside the "
                "checkpoint vocabulary")


# -- subcommands -----------------------------------------------------------------


def cmd_datagen(args):
    dcfg = DataConfig(n_patches=args.n_patches, d_feat=args.d_feat,
                      noise=args.noise, signature_patches=args.signature_patches)
    splits, vocab = generate_dataset(args.seed, args.n_train, args.n_val,
                                     args.n_test, dcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, samples in splits.items():
        write_samples(out / f"{name}.jsonl", samples)
    write_vocab(out / "vocab.json", vocab)
    with open(out / "datagen.json", "w") as fh:
        json.dump({"seed": args.seed, "n_train": args.n_train, "n_val": args.n_val,
                   "n_test": args.n_test, "n_patches": dcfg.n_patches,
                   "d_feat": dcfg.d_feat, "noise": dcfg.noise,
                   "signature_patches": dcfg.signature_patches},
                  fh, indent=2, sort_keys=True)
    print(f"wrote {args.n_train}/{args.n_val}/{args.n_test} samples to {out}")
    return 0


def cmd_train(args):
    cfg = _build_config(args)
    result = train(cfg, resume=args.resume, log=print)
    print(f"best epoch {result.best_epoch} (val bleu4 {result.best_bleu4:.4f}); "
          f"checkpoints in {cfg.out_dir}")
    return 0


def cmd_evaluate(args):
    model, vocab = _load_model(args.checkpoint)
    _check_dataset_vocab(args.data, vocab)
    samples = load_samples(args.data, model.d_feat)
    _oov_scan(samples, vocab)
    report, gens = evaluate_model(model, vocab, samples, beam=args.beam,
                                  length_norm=bool(args.length_norm))
    if args.baseline:
        try:
            with open(args.baseline) as fh:
                base_nlg = json.load(fh)["nlg"]
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{args.baseline}: not a metrics file ({exc})") from None
        report.avg_delta = avg_delta(report.nlg, base_nlg)
        report.baseline_name = str(args.baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out / "metrics.txt", "w") as fh:
        fh.write(report.to_text())
    with open(out / "generations.jsonl", "w") as fh:
        for g in gens:
            fh.write(json.dumps(g) + "\n")
    print(report.to_text(), end="")
    return 0


def cmd_generate(args):
    model, vocab = _load_model(args.checkpoint)
    samples = load_samples(args.data, model.d_feat)
    if args.id is not None:
        samples = [s for s in samples if s["id"] == args.id]
        if not samples:
            raise DataError(f"{args.data}: no sample with id {args.id}")
    gens = decode_corpus(model, vocab, samples, beam=args.beam,
                         length_norm=bool(args.length_norm))
    if args.out:
        with open(args.out, "w") as fh:
            for g in gens:
                fh.write(json.dumps(g) + "\n")
        print(f"wrote {len(gens)} generations to {args.out}")
    else:
        for g in gens:
            print(f"{g['id']}\t{g['score']:.4f}\t{g['hypothesis']}")
    return 0


def cmd_sweep_memory(args):
    cfg = _build_config(args)
    try:
        slots = tuple(int(s) for s in args.slots.split(","))
    except ValueError:
        raise ConfigError(f"--slots must be comma-separated integers, got {args.slots!r}")
    run_memory_sweep(cfg, slots=slots, log=print)
    print((Path(cfg.out_dir) / "sweep.md").read_text(), end="")
    return 0


def cmd_export_attention(args):
    model, vocab = _load_model(args.checkpoint)
    samples = load_samples(args.data, model.d_feat)
    match = [s for s in samples if s["id"] == args.id]
    if not match:
        raise DataError(f"{args.data}: no sample with id {args.id}")
    payload = attention_export(model, vocab, args.id, match[0]["features"],
                               beam=args.beam)
    write_json(args.out, payload)
    print(f"wrote {len(payload['tokens'])}x{payload['patch_count']} attention map "
          f"({len(payload['heads'])} heads) to {args.out}")
    return 0


def cmd_export_lengths(args):
    gens = []
    try:
        with open(args.generations) as fh:
            for ln, line in enumerate(fh, start=1):
                if line.strip():
                    gens.append(json.loads(line))
                    if not {"hypothesis", "reference"} <= set(gens[-1]):
                        raise DataError(f"{args.generations}:{ln}: record lacks "
                                        "hypothesis/reference")
    except OSError as exc:
        raise DataError(f"{args.generations}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.generations}: invalid JSON ({exc})") from None
    if not gens:
        raise DataError(f"{args.generations}: no records")
    write_json(args.out, lengths_export(gens))
    print(f"wrote length histograms for {len(gens)} pairs to {args.out}")
    return 0


# -- wiring ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="memreport",
        description="Train, decode, and analyze the memory-driven report generator.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-val", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--n-patches", type=int, default=16)
    p.add_argument("--d-feat", type=int, default=128)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--signature-patches", type=int, default=4)
    p.set_defaults(func=cmd_datagen)

    p = subs.add_parser("train", help="train a model per run config")
    _add_config_args(p)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="decode a dataset and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--baseline", help="metrics.json to compute avg delta against")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("generate", help="decode reports for stored features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", type=int, default=None)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("sweep-memory", help="retrain across memory slot counts")
    _add_config_args(p)
    p.add_argument("--slots", default="1,2,3,4")
    p.set_defaults(func=cmd_sweep_memory)

    p = subs.add_parser("export-attention", help="cross-attention map for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.set_defaults(func=cmd_export_attention)

    p = subs.add_parser("export-lengths", help="length histograms of a generations file")
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_lengths)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MemreportError as exc:
        print(f"error ({exc.category}): {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        traceback.print_exc()
        print(f"error (internal): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
