"""Synthetic patterned-report task.

Each sample couples patch features with a templated report over 14 finding
categories.  The report always has 14 sentences in category order: a
category's positive template when the finding is present, otherwise a
sentence from a shared normal pool, rotated by a per-sample offset so that
phrasing varies between reports while staying fully determined by the
sample seed.  Every positive template carries a keyword no other sentence
uses, which makes the label set recoverable from the text alone.

Features are built the other way around: each category owns an orthogonal
signature vector and a block of patches; present findings add their
signature to their block, then isotropic noise is added and values are
quantized to six decimals so the on-disk text form is the value.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class FindingCategory:
    """One of the 14 findings: template sentence plus feature signature."""

    id: int
    name: str
    template: tuple

    def signature(self, d_feat):
        """Unit vector marking this category in feature space."""
        if d_feat < N_CATEGORIES:
            raise ConfigError(f"d_feat {d_feat} cannot hold {N_CATEGORIES} orthogonal signatures")
        v = np.zeros(d_feat)
        v[self.id * (d_feat // N_CATEGORIES)] = 1.0
        return v


def _cat(i, name, sentence):
    return FindingCategory(i, name, tuple(sentence.split()))


CATEGORIES = (
    _cat(0, "atelectasis", "there is subsegmental atelectasis at the left base"),
    _cat(1, "cardiomegaly", "the heart shows marked cardiomegaly with enlarged silhouette"),
    _cat(2, "consolidation", "dense confluent consolidation occupies the right lower lobe"),
    _cat(3, "edema", "mild diffuse edema is seen in the interstitium"),
    _cat(4, "effusion", "a small effusion layers along the posterior pleura"),
    _cat(5, "emphysema", "emphysema changes are noted in both hyperinflated apices"),
    _cat(6, "fibrosis", "coarse reticular fibrosis distorts the upper zones"),
    _cat(7, "fracture", "an acute displaced fracture involves the third rib"),
    _cat(8, "hernia", "a large hiatal hernia projects over the mediastinum"),
    _cat(9, "infiltration", "patchy infiltration spreads through the mid lung field"),
    _cat(10, "mass", "a lobulated rounded mass is present near the hilum"),
    _cat(11, "nodule", "a solitary pulmonary nodule measures one centimeter"),
    _cat(12, "pneumonia", "findings are most consistent with pneumonia in the lingula"),
    _cat(13, "pneumothorax", "a moderate tension pneumothorax collapses the apex"),
)
N_CATEGORIES = len(CATEGORIES)

NORMAL_SENTENCES = tuple(tuple(s.split()) for s in (
    "the lungs are clear bilaterally",
    "heart size is normal",
    "no pleural abnormality seen",
    "the bones appear intact",
    "mediastinal contours are unremarkable",
    "costophrenic angles are sharp",
    "the airways are patent",
    "no focal opacity identified",
    "lung volumes remain adequate",
    "no suspicious osseous lesion",
))

# per-category presence rates; consolidation (id 2) is deliberately the
# rarest at 3.9% so the class-imbalance behaviour has something to bite on
DEFAULT_MARGINALS = (0.15, 0.20, 0.039, 0.12, 0.25, 0.07, 0.05,
                     0.05, 0.03, 0.12, 0.06, 0.10, 0.10, 0.08)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


@dataclass(frozen=True)
class DataConfig:
    n_patches: int = 16
    d_feat: int = 128
    noise: float = 0.1
    signature_patches: int = 4
    marginals: tuple = DEFAULT_MARGINALS

    def validate(self):
        if self.n_patches < 1:
            raise ConfigError(f"n_patches must be positive, got {self.n_patches}")
        if self.d_feat < N_CATEGORIES:
            raise ConfigError(f"d_feat {self.d_feat} too small for {N_CATEGORIES} signatures")
        if not 1 <= self.signature_patches <= self.n_patches:
            raise ConfigError(f"signature_patches {self.signature_patches} out of range")
        if len(self.marginals) != N_CATEGORIES:
            raise ConfigError(f"need {N_CATEGORIES} marginals, got {len(self.marginals)}")
        if self.noise < 0:
            raise ConfigError(f"noise must be nonnegative, got {self.noise}")
        return self


class Vocab:
    """Word-level vocabulary: specials first, then sorted template words."""

    def __init__(self, words):
        self.words = [PAD, BOS, EOS, UNK] + sorted(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.words)

    def encode(self, tokens):
        return [self.index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids):
        """Words for ids, dropping the pad/bos/eos markers."""
        return [self.words[i] for i in ids if i > self.eos_id]


def build_vocab():
    words = set()
    for cat in CATEGORIES:
        words.update(cat.template)
    for sent in NORMAL_SENTENCES:
        words.update(sent)
    return Vocab(words)


def render_report(labels, offset):
    """Token list: one sentence per category, positives by template.

    Absent categories read the normal pool at (offset + category) mod
    pool size, so a single offset fixes all filler phrasing.
    """
    out = []
    for cat in CATEGORIES:
        if cat.id in labels:
            out.extend(cat.template)
        else:
            out.extend(NORMAL_SENTENCES[(offset + cat.id) % len(NORMAL_SENTENCES)])
    return out


def parse_labels(report):
    """Category ids whose positive template occurs as a contiguous run."""
    tokens = report.split() if isinstance(report, str) else list(report)
    found = set()
    for cat in CATEGORIES:
        t = cat.template
        for i in range(len(tokens) - len(t) + 1):
            if tuple(tokens[i:i + len(t)]) == t:
                found.add(cat.id)
                break
    return found


def signature_rows(cat, cfg):
    """Patches a category's signature lands on: a short contiguous block."""
    start = (2 * cat.id) % cfg.n_patches
    return [(start + j) % cfg.n_patches for j in range(cfg.signature_patches)]


def render_features(labels, rng, cfg):
    """Noise plus, per present category, its signature on its patch block."""
    x = rng.normal(0.0, cfg.noise, size=(cfg.n_patches, cfg.d_feat)) if cfg.noise > 0 \
        else np.zeros((cfg.n_patches, cfg.d_feat))
    for cat in CATEGORIES:
        if cat.id in labels:
            sig = cat.signature(cfg.d_feat)
            for row in signature_rows(cat, cfg):
                x[row] += sig
    return np.round(x, 6)


def generate_sample(seed, sample_id, cfg):
    """One (features, report, labels) triple, a pure function of (seed, id)."""
    rng = np.random.default_rng([seed, sample_id])
    draws = rng.random(N_CATEGORIES)
    labels = {i for i in range(N_CATEGORIES) if draws[i] < cfg.marginals[i]}
    offset = int(rng.integers(len(NORMAL_SENTENCES)))
    return {
        "id": sample_id,
        "features": render_features(labels, rng, cfg),
        "report": " ".join(render_report(labels, offset)),
        "labels": sorted(labels),
    }


def generate_dataset(seed, n_train, n_val, n_test, cfg=None):
    """Disjoint train/val/test splits plus the task vocabulary."""
    cfg = (cfg or DataConfig()).validate()
    for name, n in (("n_train", n_train), ("n_val", n_val), ("n_test", n_test)):
        if n < 1:
            raise ConfigError(f"{name} must be at least 1, got {n}")
    counts = (n_train, n_val, n_test)
    splits = {}
    next_id = 0
    for name, n in zip(("train", "val", "test"), counts):
        splits[name] = [generate_sample(seed, next_id + i, cfg) for i in range(n)]
        next_id += n
    return splits, build_vocab()


# -- dataset files -----------------------------------------------------------


def write_samples(path, samples):
    """Line-delimited records: {id, features, report, labels}."""
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s["id"],
                "features": s["features"].tolist(),
                "report": s["report"],
                "labels": list(s["labels"]),
            }) + "\n")


def load_samples(path, d_feat=None):
    """Read records back; validates shape against d_feat when given."""
    out = []
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot read dataset ({exc})") from exc
    with fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], dtype=np.float64)
                sample = {
                    "id": int(rec["id"]),
                    "features": feats,
                    "report": rec["report"],
                    "labels": sorted(int(x) for x in rec["labels"]),
                }
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: malformed record ({exc})") from None
            if feats.ndim != 2:
                raise DataError(f"{path}:{ln}: features must be a 2D array, got shape {feats.shape}")
            if d_feat is not None and feats.shape[1] != d_feat:
                raise DataError(f"{path}:{ln}: feature width {feats.shape[1]} != expected {d_feat}")
            out.append(sample)
    if not out:
        raise DataError(f"{path}: no records")
    return out


def load_features(path, d_feat=None):
    """Feature matrices only, for running on externally extracted features."""
    return {s["id"]: s["features"] for s in load_samples(path, d_feat)}


def write_vocab(path, vocab):
    with open(path, "w") as fh:
        json.dump({"specials": vocab.words[:4], "words": vocab.words[4:]}, fh)
        fh.write("\n")


def load_vocab(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
        words = payload["words"]
        specials = payload["specials"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed vocabulary file ({exc})") from None
    if specials != [PAD, BOS, EOS, UNK]:
        raise DataError(f"{path}: unexpected special tokens {specials}")
    return Vocab(words)
