"""Release gates, one test per gate, run at the tolerances they state.

Every gate prints a single PASS line with the measured statistic (visible
under pytest -s); a failed assertion is the FAIL line.  Gates 1-5 and 7-9
run in seconds to a couple of minutes.  Gate 6 trains nine full-size models
from scratch and takes about twenty minutes; it is the directional result
the rest of the suite exists to protect, so it is not marked slow or
skippable.
"""

import itertools
import json
import time

import numpy as np
import pytest

from memreport import metrics
from memreport import tensor as T
from memreport.checkpoint import load_checkpoint, restore_model
from memreport.config import RunConfig
from memreport.cli import main as cli_main
from memreport.experiments import run_ablation
from memreport.exports import HIST_BIN_STARTS, attention_export, lengths_export, write_json
from memreport.generate import beam_search, greedy_decode, log_probs
from memreport.gradcheck import grad_check
from memreport.memory import RelationalMemory
from memreport.model import MODES, ReportModel, nll_loss
from memreport.syndata import (DataConfig, generate_dataset, load_samples,
                               render_report, write_samples, write_vocab)
from memreport.tensor import Tensor
from memreport.trainer import evaluate_model, train

TINY_DATA = DataConfig(n_patches=4, d_feat=28, signature_patches=2)


def write_dataset(root, seed, n_train, n_val, n_test, dcfg):
    splits, vocab = generate_dataset(seed, n_train, n_val, n_test, dcfg)
    for name in ("train", "val", "test"):
        write_samples(root / f"{name}.jsonl", splits[name])
    write_vocab(root / "vocab.json", vocab)
    return splits, vocab


def tiny_cfg(root, **overrides):
    base = RunConfig(d=16, n_heads=2, n_enc=1, n_dec=1, n_slots=2, d_feat=28,
                     max_len=90, epochs=2, batch_size=6, seed=1,
                     data_dir=str(root), out_dir=str(root / "run"))
    return base.with_overrides(**overrides)


def toy_model(mode="base+rm+mcln", seed=0, **kw):
    args = dict(vocab_size=6, d=8, n_heads=2, n_enc=1, n_dec=1, n_slots=2,
                d_feat=5, max_len=12, mode=mode, seed=seed)
    args.update(kw)
    return ReportModel(**args)


# -- gate 1: gradients -----------------------------------------------------


def _op_cases():
    """One numeric-vs-analytic probe per differentiable op."""
    r = np.random.default_rng(90)

    def t(*shape, lo=-1.0, hi=1.0):
        return Tensor(r.uniform(lo, hi, size=shape), requires_grad=True)

    def w(*shape):
        return r.normal(size=shape)

    a, b = t(3, 4), t(3, 4, lo=1.5, hi=2.5)
    pos = t(3, 4, lo=0.5, hi=2.0)
    away = Tensor(r.uniform(0.3, 1.2, size=(3, 4)) * r.choice([-1.0, 1.0], size=(3, 4)),
                  requires_grad=True)
    x3 = t(2, 3, 4)
    m_a, m_b = t(3, 4), t(4, 5)
    bm_a, bm_b = t(2, 3, 4), t(2, 4, 5)
    table = t(6, 4)
    ids = np.array([[0, 3, 5], [2, 2, 1]])
    g_idx = np.array([1, 3, 0])
    xq, xkv = t(2, 3, 4), t(2, 5, 4)
    wq, wk, wv = t(4, 4), t(4, 4), t(4, 4)
    mask = np.triu(np.full((3, 5), -1e9), k=3)
    rm = RelationalMemory(4, 2, 2, np.random.default_rng(91))
    emb = t(1, 3, 4)

    # weight constants are drawn once: f() must be the same function on
    # every finite-difference evaluation
    wab, w31, w26, w43 = w(3, 4), w(3, 1), w(2, 6), w(4, 3)
    w423, w224, w38, w64 = w(4, 2, 3), w(2, 2, 4), w(3, 8), w(6, 4)
    w234, w35, w235, w3 = w(2, 3, 4), w(3, 5), w(2, 3, 5), w(3)
    w_roll = w(1, 3, 8)

    def row_stats_loss():
        mu, sd = T.row_stats(a)
        return T.sum_all(mu * w31) + T.sum_all(sd * w31)

    return [
        ("add", lambda: T.sum_all(T.add(a, b) * wab), [a, b]),
        ("sub", lambda: T.sum_all(T.sub(a, b) * wab), [a, b]),
        ("mul", lambda: T.sum_all(T.mul(a, b) * wab), [a, b]),
        ("div", lambda: T.sum_all(T.div(a, b) * wab), [a, b]),
        ("neg", lambda: T.sum_all(T.neg(a) * wab), [a]),
        ("powc", lambda: T.sum_all(T.powc(pos, 1.7) * wab), [pos]),
        ("exp", lambda: T.sum_all(T.exp(a) * wab), [a]),
        ("log", lambda: T.sum_all(T.log(pos) * wab), [pos]),
        ("sqrt", lambda: T.sum_all(T.sqrt(pos) * wab), [pos]),
        ("tanh", lambda: T.sum_all(T.tanh(a) * wab), [a]),
        ("sigmoid", lambda: T.sum_all(T.sigmoid(a) * wab), [a]),
        ("relu", lambda: T.sum_all(T.relu(away) * wab), [away]),
        ("sum_all", lambda: T.sum_all(a), [a]),
        ("mean_last", lambda: T.sum_all(T.mean_last(a) * w31), [a]),
        ("row_stats", row_stats_loss, [a]),
        ("reshape", lambda: T.sum_all(T.reshape(a, (2, 6)) * w26), [a]),
        ("transpose", lambda: T.sum_all(T.transpose(a) * w43), [a]),
        ("permute", lambda: T.sum_all(T.permute(x3, (2, 0, 1)) * w423), [x3]),
        ("slice_axis", lambda: T.sum_all(T.slice_axis(x3, 1, 1, 3) * w224), [x3]),
        ("concat", lambda: T.sum_all(T.concat([a, b], axis=1) * w38), [a, b]),
        ("concat_rows", lambda: T.sum_all(T.concat_rows([a, b]) * w64), [a, b]),
        ("expand_leading", lambda: T.sum_all(T.expand_leading(a, 2) * w234), [a]),
        ("matmul_2d", lambda: T.sum_all(T.matmul(m_a, m_b) * w35), [m_a, m_b]),
        ("matmul_3d_2d", lambda: T.sum_all(T.matmul(bm_a, m_b) * w235), [bm_a, m_b]),
        ("matmul_3d_3d", lambda: T.sum_all(T.matmul(bm_a, bm_b) * w235), [bm_a, bm_b]),
        ("softmax_rows", lambda: T.sum_all(T.softmax_rows(a) * wab), [a]),
        ("logsumexp_rows", lambda: T.sum_all(T.logsumexp_rows(a) * w31), [a]),
        ("gather_rows", lambda: T.sum_all(T.gather_rows(a, g_idx) * w3), [a]),
        ("embedding", lambda: T.sum_all(T.embedding(table, ids) * w234), [table]),
        ("layer_normalize", lambda: T.sum_all(T.layer_normalize(a) * wab), [a]),
        ("attend", lambda: T.sum_all(T.attend(xq, xkv, wq, wk, wv, 2, mask=mask) * w234),
         [xq, xkv, wq, wk, wv]),
        ("memory_rollout", lambda: T.sum_all(rm.rollout(emb) * w_roll),
         [p for _, p in rm.named_parameters()] + [emb]),
    ]


def test_01_gradient_suite():
    t0 = time.monotonic()
    worst = 0.0
    for name, f, params in _op_cases():
        err = grad_check(f, params)
        assert err <= 1e-4, f"op {name}: relative error {err:.3e}"
        worst = max(worst, err)

    m = toy_model(seed=16)  # d=8, two heads, one layer each side, two slots
    feats = Tensor(np.random.default_rng(17).normal(size=(1, 3, 5)), requires_grad=True)
    targets = np.array([[3, 4, 5]])

    def f():
        enc = m.encode(feats)
        logits = m.decode_teacher_forced(enc, targets, m.memory_sequence(targets))
        return nll_loss(logits, targets, 0)

    params = [p for _, p in m.named_parameters()] + [feats]
    err = grad_check(f, params)
    assert err <= 1e-4, f"end-to-end: relative error {err:.3e}"
    worst = max(worst, err)

    elapsed = time.monotonic() - t0
    assert elapsed <= 120.0, f"gradient suite took {elapsed:.0f}s"
    print(f"PASS gate 1: gradient suite, worst rel err {worst:.2e}, {elapsed:.0f}s")


# -- gate 2: zero conditioning reduces to the plain model -------------------


def test_02_zero_conditioning_matches_plain_model():
    full = toy_model("base+rm+mcln", seed=9, vocab_size=11)
    base = toy_model("base", seed=10, vocab_size=11)
    shared = dict(full.named_parameters())
    for name, p in base.named_parameters():
        p.data[:] = shared[name].data

    r = np.random.default_rng(8)
    worst = 0.0
    for trial in range(10):
        feats = r.normal(size=(2, 4, 5))
        targets = r.integers(3, 11, size=(2, 7))
        lf = full.decode_teacher_forced(full.encode(feats), targets,
                                        full.memory_sequence(targets))
        lb = base.decode_teacher_forced(base.encode(feats), targets, None)
        gap = np.abs(lf.data - lb.data).max()
        loss_gap = abs(nll_loss(lf, targets, 0).item() - nll_loss(lb, targets, 0).item())
        assert gap <= 1e-9, f"trial {trial}: logits differ by {gap:.3e}"
        assert loss_gap <= 1e-9, f"trial {trial}: losses differ by {loss_gap:.3e}"
        worst = max(worst, gap, loss_gap)
    print(f"PASS gate 2: zero-conditioned model equals plain one, max gap {worst:.2e}")


# -- gate 3: memory invariants ----------------------------------------------


def test_03_memory_prefix_property_and_gate_bounds():
    rm = RelationalMemory(8, 2, 3, np.random.default_rng(30))
    table = Tensor(np.random.default_rng(31).normal(size=(11, 8)))
    r = np.random.default_rng(32)
    for trial in range(100):
        prefix = list(r.integers(1, 11, size=r.integers(0, 9)))
        extension = list(r.integers(1, 11, size=r.integers(1, 4)))
        a = rm.rollout_prefix(prefix, table, bos_id=1)
        b = rm.rollout_prefix(prefix + extension, table, bos_id=1)
        assert len(b) == len(a) + len(extension)
        for sa, sb in zip(a, b):
            assert sa.matrix.shape == (3, 8)
            assert np.array_equal(sa.matrix, sb.matrix), f"trial {trial}"

    m = rm.initial(4)
    for t in range(8):
        y = Tensor(r.normal(size=(4, 1, 8)) * 2.0)
        gf, gi = rm.gate_activations(m, y)
        m_next = rm.step(m, y)
        assert ((gf.data > 0) & (gf.data < 1)).all()
        assert ((gi.data > 0) & (gi.data < 1)).all()
        bound = gf.data * np.abs(m.data) + gi.data
        assert (np.abs(m_next.data) <= bound + 1e-12).all()
        assert m_next.data.shape == m.data.shape
        m = m_next
    print("PASS gate 3: prefix property bit-exact on 100 prefixes, gates in (0, 1)")


# -- gate 4: beam search vs brute force ---------------------------------------


def _seq_logprob(model, feats, tokens, terminated):
    row = list(tokens) + ([model.eos_id] if terminated else [])
    targets = np.asarray([row], dtype=np.int64)
    with T.no_grad():
        enc = model.encode(Tensor(feats))
        logits = model.decode_teacher_forced(enc, targets, model.memory_sequence(targets))
    lp = log_probs(logits.data[0])
    return float(sum(lp[t, row[t]] for t in range(len(row))))


def test_04_beam_matches_exhaustive_search():
    content = (3, 4, 5)
    for seed in range(5):
        model = toy_model(seed=seed)
        feats = np.random.default_rng(seed + 20).normal(size=(1, 4, 5))
        completions = []
        for n in range(3):
            completions.extend((c, True) for c in itertools.product(content, repeat=n))
        completions.extend((c, False) for c in itertools.product(content, repeat=3))
        scored = sorted(
            ((-_seq_logprob(model, feats, toks, fin), len(toks), toks, fin)
             for toks, fin in completions))
        best_score, _, best_tokens, _ = scored[0]

        top = beam_search(model, feats, beam=27, max_len=3)[0]
        assert top.tokens == best_tokens, f"seed {seed}"
        assert abs(top.logp - (-best_score)) <= 1e-9, f"seed {seed}"

    for mode in MODES:
        for seed in range(3):
            model = toy_model(mode=mode, seed=seed + 40)
            feats = np.random.default_rng(seed + 50).normal(size=(1, 4, 5))
            assert (list(beam_search(model, feats, beam=1, max_len=8)[0].tokens)
                    == greedy_decode(model, feats, max_len=8)), (mode, seed)
    print("PASS gate 4: beam 27 equals brute force on 5 seeds, beam 1 equals greedy")


# -- gate 5: metric fixtures ---------------------------------------------------


def test_05_metric_fixture_oracle_values():
    checks = [
        ("bleu1 clipped 2/7", metrics.bleu(["the the the the the the the"],
                                           ["the cat is on the mat"])[0], 2 / 7),
        ("bleu1 two-pair", metrics.bleu(["a b c d", "a b"], ["a b c d", "a c"])[0],
         0.8333333333333334),
        ("bleu2 two-pair", metrics.bleu(["a b c d", "a b"], ["a b c d", "a c"])[1],
         0.7905694150420949),
        ("bleu4 two-pair", metrics.bleu(["a b c d", "a b"], ["a b c d", "a c"])[3],
         0.8891397050194614),
        ("bleu brevity", metrics.bleu(["a b"], ["a b c d"])[0], 0.36787944117144233),
        ("rouge 3-of-4", metrics.rouge_l(["a c d"], ["a b c d"]), 0.8356164383561644),
        ("rouge corpus", metrics.rouge_l(["x y", "a c d"], ["x y", "a b c d"]),
         0.9178082191780822),
        ("meteor identical", metrics.meteor_lite(["a b c d e"], ["a b c d e"]),
         1.0 - 0.5 / 125),
        ("meteor partial", metrics.meteor_lite(["the cat sat"],
                                               ["the cat is on the mat"]),
         0.3289473684210526),
        ("delta reference a", metrics.avg_delta(
            {"bleu_1": 0.470, "bleu_2": 0.304, "bleu_3": 0.219,
             "bleu_4": 0.165, "meteor": 0.187, "rouge_l": 0.371},
            {"bleu_1": 0.396, "bleu_2": 0.254, "bleu_3": 0.179,
             "bleu_4": 0.135, "meteor": 0.164, "rouge_l": 0.342}),
         0.1757407023364976),
        ("delta reference b", metrics.avg_delta(
            {"bleu_1": 0.353, "bleu_2": 0.218, "bleu_3": 0.145,
             "bleu_4": 0.103, "meteor": 0.142, "rouge_l": 0.277},
            {"bleu_1": 0.314, "bleu_2": 0.192, "bleu_3": 0.127,
             "bleu_4": 0.090, "meteor": 0.125, "rouge_l": 0.265}),
         0.12118003918327554),
    ]
    for name, got, want in checks:
        assert abs(got - want) <= 1e-9, f"{name}: got {got!r}, want {want!r}"

    gold = [{0}, {0}, set(), set()]
    generated = [" ".join(render_report({0}, 0)), " ".join(render_report(set(), 1)),
                 " ".join(render_report({0}, 2)), " ".join(render_report(set(), 3))]
    scores = metrics.label_efficacy(generated, gold)
    assert abs(scores.per_category[0]["precision"] - 0.5) <= 1e-9
    assert abs(scores.per_category[0]["recall"] - 0.5) <= 1e-9
    assert abs(scores.f1 - 13.5 / 14) <= 1e-9
    print(f"PASS gate 5: {len(checks) + 3} metric fixtures within 1e-9")


# -- gate 6: the ablation -------------------------------------------------------


def test_06_ablation_orders_variants(tmp_path):
    t0 = time.monotonic()
    data = tmp_path / "data"
    data.mkdir()
    write_dataset(data, seed=101, n_train=2000, n_val=60, n_test=240,
                  dcfg=DataConfig())
    cfg = RunConfig(epochs=8, data_dir=str(data), out_dir=str(tmp_path / "abl"))
    summary = run_ablation(cfg, seeds=(0, 1, 2))
    elapsed = time.monotonic() - t0

    med = summary["median"]
    b4 = {mode: med[mode]["bleu_4"] for mode in MODES}
    assert b4["base+rm+mcln"] >= b4["base+rm"] >= b4["base"], b4
    delta = summary["avg_delta_full_vs_base"]
    assert delta >= 0.05, f"avg delta {delta:+.1%}"
    f1 = {mode: med[mode]["label_f1"] for mode in ("base", "base+rm+mcln")}
    assert f1["base+rm+mcln"] >= f1["base"], f1
    assert elapsed <= 1800.0, f"ablation took {elapsed:.0f}s"
    print(f"PASS gate 6: median bleu4 {b4['base+rm+mcln']:.3f} >= "
          f"{b4['base+rm']:.3f} >= {b4['base']:.3f}, avg delta {delta:+.1%}, "
          f"label f1 {f1['base+rm+mcln']:.3f} >= {f1['base']:.3f}, {elapsed:.0f}s")


# -- gate 7: slot sweep harness -------------------------------------------------


def test_07_slot_sweep_emits_growing_models(tmp_path):
    write_dataset(tmp_path, seed=7, n_train=12, n_val=4, n_test=4, dcfg=TINY_DATA)
    code = cli_main(["sweep-memory", "--slots", "1,2,3,4", "--epochs", "1",
                     "--d", "16", "--n-heads", "2", "--n-enc", "1", "--n-dec", "1",
                     "--d-feat", "28", "--max-len", "90", "--batch-size", "6",
                     "--seed", "1", "--data-dir", str(tmp_path),
                     "--out-dir", str(tmp_path / "sweep")])
    assert code == 0

    summary = json.load(open(tmp_path / "sweep" / "sweep.json"))
    assert [r["n_slots"] for r in summary["rows"]] == [1, 2, 3, 4]
    params = [r["n_params"] for r in summary["rows"]]
    assert all(a < b for a, b in zip(params, params[1:])), params
    table = (tmp_path / "sweep" / "sweep.md").read_text().splitlines()
    assert len([l for l in table if l.startswith("| ") and not l.startswith("| slots")]) == 4
    print(f"PASS gate 7: sweep over 1-4 slots, params {params}")


# -- gate 8: exports --------------------------------------------------------------


def test_08_attention_and_length_exports(tmp_path):
    write_dataset(tmp_path, seed=7, n_train=12, n_val=4, n_test=4, dcfg=TINY_DATA)
    cfg = tiny_cfg(tmp_path)
    result = train(cfg)
    model, vocab = restore_model(load_checkpoint(result.best_path))
    samples = load_samples(tmp_path / "val.jsonl", cfg.d_feat)

    sample = samples[0]
    feats = np.asarray(sample["features"])
    payload = attention_export(model, vocab, sample["id"], feats, beam=cfg.beam)
    arr = np.asarray(payload["heads"])
    n_heads, t_len, n_patches = arr.shape
    assert (n_heads, n_patches) == (cfg.n_heads, TINY_DATA.n_patches)
    assert t_len >= 1 and payload["patch_count"] == n_patches
    worst = np.abs(arr.sum(axis=2) - 1.0).max()
    mean = np.asarray(payload["head_mean"])
    assert mean.shape == (t_len, n_patches)
    worst = max(worst, np.abs(mean.sum(axis=1) - 1.0).max())
    assert worst <= 1e-9, f"attention rows off by {worst:.3e}"

    write_json(tmp_path / "a.json", payload)
    write_json(tmp_path / "b.json", payload)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    _, gens = evaluate_model(model, vocab, samples, beam=cfg.beam)
    hist = lengths_export(gens)
    assert hist["bin_starts"] == list(range(0, 101, 10)) == HIST_BIN_STARTS
    assert sum(hist["hypothesis"]) == len(samples)
    assert sum(hist["reference"]) == len(samples)
    print(f"PASS gate 8: attention rows stochastic within {worst:.1e}, "
          f"length bins sum to {len(samples)}")


# -- gate 9: run-to-run determinism ------------------------------------------------


def test_09_training_is_bit_deterministic(tmp_path):
    write_dataset(tmp_path, seed=7, n_train=12, n_val=4, n_test=4, dcfg=TINY_DATA)
    reports = []
    for tag in ("first", "second"):
        cfg = tiny_cfg(tmp_path, out_dir=str(tmp_path / tag))
        result = train(cfg)
        model, vocab = restore_model(load_checkpoint(result.best_path))
        report, gens = evaluate_model(model, vocab,
                                      load_samples(tmp_path / "test.jsonl", cfg.d_feat),
                                      beam=cfg.beam)
        reports.append(json.dumps(report.to_dict(), sort_keys=True))
    for name in ("last.ckpt", "best.ckpt", "loss_log.jsonl"):
        a = (tmp_path / "first" / name).read_bytes()
        b = (tmp_path / "second" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"
    assert reports[0] == reports[1]
    print("PASS gate 9: identical runs give identical checkpoints and reports")
