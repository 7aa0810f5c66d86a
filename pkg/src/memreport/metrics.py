"""Corpus evaluation: BLEU, ROUGE-L, METEOR-lite, label efficacy, Avg Δ.

All text metrics tokenize the same way (lowercase, punctuation stripped,
whitespace split) and take parallel candidate/reference lists.  METEOR here
is an exact-match variant: no stemming or synonym sets, so absolute values
are not comparable to implementations that use them, only to itself.
"""

import string
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .syndata import CATEGORIES, parse_labels

NLG_KEYS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "meteor", "rouge_l")

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text):
    """Lowercased whitespace tokens with punctuation characters removed."""
    if not isinstance(text, str):
        return [str(t).lower() for t in text]
    return [w for w in text.lower().translate(_PUNCT).split() if w]


def _pairs(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(
            f"corpus size mismatch: {len(candidates)} candidates, {len(references)} references")
    if not candidates:
        raise ContractError("empty corpus")
    return [(tokenize(c), tokenize(r)) for c, r in zip(candidates, references)]


# -- BLEU ---------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidates, references, n):
    """Corpus clipped n-gram counts: (matched, total)."""
    matched = total = 0
    for cand, ref in _pairs(candidates, references):
        cgrams = _ngrams(cand, n)
        rgrams = _ngrams(ref, n)
        matched += sum(min(c, rgrams[g]) for g, c in cgrams.items())
        total += max(len(cand) - n + 1, 0)
    return matched, total


def bleu(candidates, references, max_n=4):
    """Corpus BLEU-1..max_n: clipped precision, geometric mean, brevity penalty.

    No smoothing: any zero n-gram precision zeroes the scores using it.
    """
    pairs = _pairs(candidates, references)
    c_len = sum(len(c) for c, _ in pairs)
    r_len = sum(len(r) for _, r in pairs)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else float(np.exp(1.0 - r_len / c_len))
    precisions = []
    for n in range(1, max_n + 1):
        matched, total = modified_precision(candidates, references, n)
        precisions.append(matched / total if total else 0.0)
    scores = []
    for n in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:n]):
            scores.append(0.0)
        else:
            scores.append(bp * float(np.exp(np.mean(np.log(precisions[:n])))))
    return scores


# -- ROUGE-L ------------------------------------------------------------------


def _lcs_len(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta=1.2):
    """Mean per-pair LCS F-measure weighted toward recall by beta."""
    total = 0.0
    pairs = _pairs(candidates, references)
    for cand, ref in pairs:
        if not cand or not ref:
            continue
        lcs = _lcs_len(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        total += (1 + beta * beta) * p * r / (r + beta * beta * p)
    return total / len(pairs)


# -- METEOR (exact-match variant) ---------------------------------------------


def _align(cand, ref):
    """Greedy left-to-right exact matching to the earliest unused ref slot."""
    occurrences = {}
    for j, w in enumerate(ref):
        occurrences.setdefault(w, []).append(j)
    used = {w: 0 for w in occurrences}
    mapping = []
    for i, w in enumerate(cand):
        slots = occurrences.get(w)
        if slots is None or used[w] >= len(slots):
            continue
        mapping.append((i, slots[used[w]]))
        used[w] += 1
    return mapping


def _chunks(mapping):
    runs = 0
    prev = None
    for i, j in mapping:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            runs += 1
        prev = (i, j)
    return runs


def meteor_lite(candidates, references):
    """Mean per-pair harmonic score (recall weighted 9:1) with chunk penalty."""
    total = 0.0
    pairs = _pairs(candidates, references)
    for cand, ref in pairs:
        mapping = _align(cand, ref)
        m = len(mapping)
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(ref)
        fmean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (_chunks(mapping) / m) ** 3
        total += fmean * (1.0 - penalty)
    return total / len(pairs)


# -- label efficacy -------------------------------------------------------------


@dataclass
class LabelScores:
    """Binary precision/recall/F1 per finding category plus macro averages."""

    per_category: list
    precision: float
    recall: float
    f1: float


def label_efficacy(generated_reports, gold_label_sets):
    """Template-extracted labels of generated text scored against gold sets.

    A category with no predictions counts precision 1, one with no gold
    positives counts recall 1, so untouched categories do not drag the
    macro average down.
    """
    if len(generated_reports) != len(gold_label_sets):
        raise ContractError(
            f"{len(generated_reports)} reports vs {len(gold_label_sets)} label sets")
    predicted = [parse_labels(r) for r in generated_reports]
    gold = [set(g) for g in gold_label_sets]
    rows = []
    for cat in CATEGORIES:
        tp = sum(1 for p, g in zip(predicted, gold) if cat.id in p and cat.id in g)
        fp = sum(1 for p, g in zip(predicted, gold) if cat.id in p and cat.id not in g)
        fn = sum(1 for p, g in zip(predicted, gold) if cat.id not in p and cat.id in g)
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append({"id": cat.id, "name": cat.name,
                     "precision": prec, "recall": rec, "f1": f1})
    return LabelScores(
        per_category=rows,
        precision=float(np.mean([r["precision"] for r in rows])),
        recall=float(np.mean([r["recall"] for r in rows])),
        f1=float(np.mean([r["f1"] for r in rows])),
    )


# -- comparisons and reports ----------------------------------------------------


def nlg_metrics(candidates, references):
    """All six text scores as a flat dict."""
    b = bleu(candidates, references)
    return {
        "bleu_1": b[0], "bleu_2": b[1], "bleu_3": b[2], "bleu_4": b[3],
        "meteor": meteor_lite(candidates, references),
        "rouge_l": rouge_l(candidates, references),
    }


def avg_delta(scores, baseline):
    """Mean relative improvement over the six text metrics.

    Metrics where the baseline is zero are left out (with a warning) since
    their relative change is undefined.
    """
    deltas = []
    for key in NLG_KEYS:
        if key not in scores or key not in baseline:
            raise ContractError(f"missing metric {key!r} in comparison input")
        if baseline[key] == 0.0:
            warnings.warn(f"baseline {key} is zero; excluded from avg_delta")
            continue
        deltas.append((scores[key] - baseline[key]) / baseline[key])
    if not deltas:
        raise ContractError("every baseline metric is zero; avg_delta undefined")
    return float(np.mean(deltas))


def length_histogram(reports):
    """Counts of reports by token length: ten bins over [0,100) plus >=100."""
    counts = np.zeros(11, dtype=np.int64)
    for rep in reports:
        n = len(tokenize(rep))
        counts[min(n // 10, 10)] += 1
    return counts


@dataclass
class MetricsReport:
    """Everything evaluate() produces for one decoded corpus."""

    nlg: dict
    labels: LabelScores
    histogram: np.ndarray
    avg_delta: float = None
    baseline_name: str = None
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {
            "nlg": dict(self.nlg),
            "label_efficacy": {
                "precision": self.labels.precision,
                "recall": self.labels.recall,
                "f1": self.labels.f1,
                "per_category": self.labels.per_category,
            },
            "length_histogram": self.histogram.tolist(),
        }
        if self.avg_delta is not None:
            out["avg_delta"] = self.avg_delta
            out["avg_delta_baseline"] = self.baseline_name
        out.update(self.extras)
        return out

    def to_text(self):
        lines = [f"{k}={self.nlg[k]:.6f}" for k in NLG_KEYS]
        lines.append(f"label_precision={self.labels.precision:.6f}")
        lines.append(f"label_recall={self.labels.recall:.6f}")
        lines.append(f"label_f1={self.labels.f1:.6f}")
        if self.avg_delta is not None:
            lines.append(f"avg_delta={self.avg_delta:.6f}")
        lines.append("length_histogram=" + ",".join(str(c) for c in self.histogram))
        return "\n".join(lines) + "\n"
