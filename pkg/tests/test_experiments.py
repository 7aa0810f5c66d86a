"""Ablation and slot-sweep drivers, run at toy scale for structure checks."""

import json

import pytest

from memreport.errors import ConfigError
from memreport.experiments import TABLE_KEYS, run_ablation, run_memory_sweep
from memreport.model import MODES, ReportModel
from memreport.config import RunConfig
from memreport.syndata import DataConfig, generate_dataset, write_samples, write_vocab

TINY_DATA = DataConfig(n_patches=4, d_feat=28, signature_patches=2)


def make_data(root, n_train=12, n_val=4, n_test=4, seed=7):
    splits, vocab = generate_dataset(seed, n_train, n_val, n_test, TINY_DATA)
    for name in ("train", "val", "test"):
        write_samples(root / f"{name}.jsonl", splits[name])
    write_vocab(root / "vocab.json", vocab)
    return splits, vocab


def tiny_cfg(root, **overrides):
    base = RunConfig(d=16, n_heads=2, n_enc=1, n_dec=1, n_slots=2, d_feat=28,
                     max_len=90, epochs=1, batch_size=6, seed=1,
                     data_dir=str(root), out_dir=str(root / "exp"))
    return base.with_overrides(**overrides)


@pytest.mark.filterwarnings("ignore:baseline")
def test_ablation_writes_summary_and_per_run_artifacts(tmp_path):
    make_data(tmp_path)
    summary = run_ablation(tiny_cfg(tmp_path), seeds=(0,))

    assert summary["seeds"] == [0]
    assert len(summary["per_run"]) == len(MODES)
    for row in summary["per_run"]:
        assert row["mode"] in MODES
        assert all(k in row for k in TABLE_KEYS)
    for mode in MODES:
        med = summary["median"][mode]
        assert set(med) == set(TABLE_KEYS)
    assert isinstance(summary["avg_delta_full_vs_base"], float)
    assert isinstance(summary["bleu4_ordering_ok"], bool)
    assert isinstance(summary["label_f1_ok"], bool)

    root = tmp_path / "exp"
    assert json.load(open(root / "ablation.json")) == json.loads(json.dumps(summary))
    table = (root / "ablation.md").read_text().splitlines()
    assert table[0].startswith("| variant |")
    assert len([l for l in table if l.startswith("| base")]) == len(MODES)
    for mode in MODES:
        sub = root / f"{mode.replace('+', '_')}_seed0"
        assert (sub / "best.ckpt").exists()
        assert (sub / "test_metrics.json").exists()
        assert len(list(open(sub / "generations.jsonl"))) == 4


def test_sweep_rows_cover_slots(tmp_path):
    make_data(tmp_path)
    summary = run_memory_sweep(tiny_cfg(tmp_path, mode="base+rm+mcln"),
                               slots=(1, 2))

    assert [r["n_slots"] for r in summary["rows"]] == [1, 2]
    params = [r["n_params"] for r in summary["rows"]]
    assert params[0] < params[1]
    assert (tmp_path / "exp" / "sweep.md").exists()

    # per-slot runs are identical configs apart from the slot count itself
    a = json.load(open(tmp_path / "exp" / "slots1" / "config.json"))
    b = json.load(open(tmp_path / "exp" / "slots2" / "config.json"))
    differing = {k for k in a if a[k] != b[k]}
    assert differing == {"n_slots", "out_dir"}


def test_sweep_rejects_memoryless_mode(tmp_path):
    make_data(tmp_path)
    with pytest.raises(ConfigError, match="base"):
        run_memory_sweep(tiny_cfg(tmp_path, mode="base"), slots=(1,))


def test_slot_count_only_reshapes_memory_conditioned_params():
    kw = dict(vocab_size=40, d=16, n_heads=2, n_enc=1, n_dec=1, d_feat=28,
              max_len=30, mode="base+rm+mcln", seed=0)
    small = dict(ReportModel(n_slots=2, **kw).named_parameters())
    large = dict(ReportModel(n_slots=3, **kw).named_parameters())

    assert set(small) == set(large)
    reshaped = {n for n in small if small[n].data.shape != large[n].data.shape}
    assert "rm.m0" in reshaped
    for name in reshaped:
        assert any(tag in name for tag in ("m0", "gamma_mlp", "beta_mlp", "out_proj"))
