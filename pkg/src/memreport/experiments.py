"""Multi-run experiments: the three-variant ablation and the slot sweep.

Both drive the ordinary train/evaluate path per run and reduce the results
into one table file, so a failed run surfaces as a missing row rather than
a silently averaged-over hole.
"""

import json
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, restore_model
from .errors import ConfigError
from .model import MODES
from .syndata import load_samples
from .trainer import evaluate_model, train

TABLE_KEYS = metrics.NLG_KEYS + ("label_f1",)


def _run_once(cfg, log=None):
    """Train one config and score its best checkpoint on the test set."""
    result = train(cfg, log=log)
    model, vocab = restore_model(load_checkpoint(result.best_path))
    test = load_samples(Path(cfg.data_dir) / "test.jsonl", cfg.d_feat)
    report, gens = evaluate_model(model, vocab, test, beam=cfg.beam,
                                  length_norm=cfg.length_norm)
    scores = dict(report.nlg)
    scores["label_f1"] = report.labels.f1
    out_dir = Path(cfg.out_dir)
    with open(out_dir / "test_metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    with open(out_dir / "generations.jsonl", "w") as fh:
        for g in gens:
            fh.write(json.dumps(g) + "\n")
    return scores


def _median_scores(rows):
    return {k: float(np.median([r[k] for r in rows])) for k in TABLE_KEYS}


def run_ablation(cfg, seeds=(0, 1, 2), log=None):
    """Train every variant for every seed; summarize medians per variant.

    Writes ablation.json and ablation.md under cfg.out_dir; per-run artifacts
    land in <out_dir>/<mode>_seed<k>/.
    """
    cfg.validate()
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    per_run, medians = [], {}
    for mode in MODES:
        rows = []
        for seed in seeds:
            sub = root / f"{mode.replace('+', '_')}_seed{seed}"
            run_cfg = cfg.with_overrides(mode=mode, seed=seed, out_dir=str(sub))
            if log:
                log(f"[ablation] {mode} seed {seed}")
            scores = _run_once(run_cfg, log=log)
            rows.append(scores)
            per_run.append({"mode": mode, "seed": seed, **scores})
        medians[mode] = _median_scores(rows)
    delta = metrics.avg_delta({k: medians["base+rm+mcln"][k] for k in metrics.NLG_KEYS},
                              {k: medians["base"][k] for k in metrics.NLG_KEYS})
    summary = {
        "seeds": list(seeds),
        "per_run": per_run,
        "median": medians,
        "avg_delta_full_vs_base": delta,
        "bleu4_ordering_ok": (medians["base+rm+mcln"]["bleu_4"]
                              >= medians["base+rm"]["bleu_4"]
                              >= medians["base"]["bleu_4"]),
        "label_f1_ok": medians["base+rm+mcln"]["label_f1"] >= medians["base"]["label_f1"],
    }
    with open(root / "ablation.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(root / "ablation.md", "w") as fh:
        fh.write(_format_table(
            header=["variant"] + list(TABLE_KEYS),
            rows=[[mode] + [f"{medians[mode][k]:.4f}" for k in TABLE_KEYS]
                  for mode in MODES],
            caption=f"median over seeds {list(seeds)}; "
                    f"avg delta full vs base: {delta:+.1%}"))
    return summary


def run_memory_sweep(cfg, slots=(1, 2, 3, 4), log=None):
    """Retrain with S_mem swept over ``slots``; tabulate scores and sizes."""
    cfg.validate()
    if cfg.mode == "base":
        raise ConfigError("memory sweep needs a memory variant; mode is 'base'")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for n_slots in slots:
        sub = root / f"slots{n_slots}"
        run_cfg = cfg.with_overrides(n_slots=n_slots, out_dir=str(sub))
        if log:
            log(f"[sweep] {n_slots} slot(s)")
        scores = _run_once(run_cfg, log=log)
        model, _ = restore_model(load_checkpoint(Path(sub) / "best.ckpt"))
        rows.append({"n_slots": n_slots, "n_params": model.num_parameters(),
                     **scores})
    summary = {"slots": list(slots), "rows": rows}
    with open(root / "sweep.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    with open(root / "sweep.md", "w") as fh:
        fh.write(_format_table(
            header=["slots", "params"] + list(TABLE_KEYS),
            rows=[[str(r["n_slots"]), str(r["n_params"])]
                  + [f"{r[k]:.4f}" for k in TABLE_KEYS] for r in rows],
            caption=f"memory-slot sweep, mode {cfg.mode}"))
    return summary


def _format_table(header, rows, caption):
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + f"\n\n{caption}\n"
