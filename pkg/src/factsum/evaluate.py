"""ROUGE-1/2/L F1, perplexity, gate analytics and faithfulness tallies."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import model as M
from .corpus import encode_batch

FAITH_LABELS = ("FAITHFUL", "FAKE", "UNCLEAR")


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision, recall):
        denom = precision + recall
        f1 = 2.0 * precision * recall / denom if denom > 0 else 0.0
        return cls(precision, recall, f1)


# --- Porter stemmer --------------------------------------------------------
#
# Compact implementation of the classic algorithm (steps 1a-5b), used only
# behind the optional `stem` flag of the ROUGE scorers.

_VOWELS = "aeiou"


def _cons(word, i):
    c = word[i]
    if c in _VOWELS:
        return False
    if c == "y":
        return i == 0 or not _cons(word, i - 1)
    return True


def _measure(stem):
    # number of VC spans in the C?(VC)^m V? decomposition
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        vowel = not _cons(stem, i)
        if prev_vowel and not vowel:
            m += 1
        prev_vowel = vowel
    return m


def _has_vowel(stem):
    return any(not _cons(stem, i) for i in range(len(stem)))


def _double_cons(word):
    return (len(word) >= 2 and word[-1] == word[-2] and _cons(word, len(word) - 1))


def _cvc(word):
    # ends consonant-vowel-consonant, final consonant not w, x or y
    if len(word) < 3:
        return False
    i = len(word) - 1
    return (_cons(word, i) and word[i] not in "wxy"
            and not _cons(word, i - 1) and _cons(word, i - 2))


def _replace(word, suffix, repl, min_measure):
    if not word.endswith(suffix):
        return None
    stem = word[: len(word) - len(suffix)]
    if _measure(stem) > min_measure:
        return stem + repl
    return word


_STEP2 = (("ational", "ate"), ("tional", "tion"), ("enci", "ence"),
          ("anci", "ance"), ("izer", "ize"), ("abli", "able"), ("alli", "al"),
          ("entli", "ent"), ("eli", "e"), ("ousli", "ous"),
          ("ization", "ize"), ("ation", "ate"), ("ator", "ate"),
          ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
          ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"),
          ("biliti", "ble"))
_STEP3 = (("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
          ("ical", "ic"), ("ful", ""), ("ness", ""))
_STEP4 = ("al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
          "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize")


def porter_stem(word):
    """Porter-stem one lowercase word; words of length <= 2 are unchanged."""
    if len(word) <= 2:
        return word
    w = word

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif not w.endswith("ss") and w.endswith("s"):
        w = w[:-1]

    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        hit = None
        for suf in ("ed", "ing"):
            if w.endswith(suf) and _has_vowel(w[: -len(suf)]):
                hit = w[: -len(suf)]
                break
        if hit is not None:
            w = hit
            if w.endswith(("at", "bl", "iz")):
                w += "e"
            elif _double_cons(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _cvc(w):
                w += "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    for suf, repl in _STEP2:
        out = _replace(w, suf, repl, 0)
        if out is not None:
            w = out
            break
    for suf, repl in _STEP3:
        out = _replace(w, suf, repl, 0)
        if out is not None:
            w = out
            break
    for suf in _STEP4:
        if w.endswith(suf):
            stem = w[: len(w) - len(suf)]
            if suf == "ion" and (not stem or stem[-1] not in "st"):
                continue
            if _measure(stem) > 1:
                w = stem
            break

    # step 5a
    if w.endswith("e"):
        stem = w[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _cvc(stem)):
            w = stem
    # step 5b
    if _measure(w) > 1 and _double_cons(w) and w.endswith("l"):
        w = w[:-1]
    return w


def _prepare(tokens, stem):
    tokens = list(tokens)
    if stem:
        tokens = [porter_stem(t) for t in tokens]
    return tokens


# --- ROUGE ------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n, stem=False):
    """Clipped n-gram overlap F1 between two token sequences."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cand = _ngrams(_prepare(candidate, stem), n)
    ref = _ngrams(_prepare(reference, stem), n)
    overlap = sum(min(count, ref[g]) for g, count in cand.items())
    c_total = sum(cand.values())
    r_total = sum(ref.values())
    precision = overlap / c_total if c_total else 0.0
    recall = overlap / r_total if r_total else 0.0
    return RougeScore.from_pr(precision, recall)


def _lcs_len(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, stem=False):
    """Longest-common-subsequence F1 between two token sequences."""
    cand = _prepare(candidate, stem)
    ref = _prepare(reference, stem)
    ell = _lcs_len(cand, ref)
    precision = ell / len(cand) if cand else 0.0
    recall = ell / len(ref) if ref else 0.0
    return RougeScore.from_pr(precision, recall)


def evaluate_summaries(candidates, references, stem=False):
    """Corpus-averaged ROUGE-1/2/L over parallel candidate/reference lists."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("nothing to evaluate")
    scores = {"rouge-1": [], "rouge-2": [], "rouge-l": []}
    for cand, ref in zip(candidates, references):
        scores["rouge-1"].append(rouge_n(cand, ref, 1, stem))
        scores["rouge-2"].append(rouge_n(cand, ref, 2, stem))
        scores["rouge-l"].append(rouge_l(cand, ref, stem))
    report = {}
    for metric, vals in scores.items():
        report[metric] = {
            "precision": float(np.mean([v.precision for v in vals])),
            "recall": float(np.mean([v.recall for v in vals])),
            "f1": float(np.mean([v.f1 for v in vals])),
        }
    return report


# --- model-level metrics -----------------------------------------------------


def perplexity(params, cfg, batches):
    """exp(per-token NLL) over the batches, dropout disabled."""
    loss, _, _ = M.dataset_loss(params, cfg, batches)
    return float(np.exp(loss))


@dataclass
class GateReport:
    mean: float
    std: float
    pair_means: list  # (pair index, per-pair mean gate), dataset order
    top: list  # highest per-pair mean first
    bottom: list  # lowest per-pair mean first


def gate_report(params, cfg, pairs, src_vocab, tgt_vocab, top_k=5):
    """Aggregate gate statistics plus per-pair extremes (gated mode only)."""
    if cfg.fusion_mode != "gated":
        raise ValueError("gate report requires a gated-fusion model")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty dataset")
    g_sum = g_sq = g_n = 0.0
    pair_means = []
    for idx, pair in enumerate(pairs):
        batch = encode_batch([pair], src_vocab, tgt_vocab)
        fwd = M.teacher_forced_distributions(params, cfg, batch)
        w = fwd.step_mask[:, :, None]
        total = float((fwd.gates * w).sum())
        count = float(w.sum()) * fwd.gates.shape[-1]
        g_sum += total
        g_sq += float((fwd.gates**2 * w).sum())
        g_n += count
        pair_means.append((idx, total / count if count else 0.0))
    mean = g_sum / g_n
    var = max(g_sq / g_n - mean * mean, 0.0)
    ranked = sorted(pair_means, key=lambda im: (-im[1], im[0]))
    return GateReport(mean=mean, std=float(np.sqrt(var)), pair_means=pair_means,
                      top=ranked[:top_k], bottom=ranked[::-1][:top_k])


def faithfulness_tally(path):
    """Count annotation labels per system from a TSV annotation file.

    Each line is ``system_id<TAB>example_id<TAB>label``; blank lines are
    skipped.  Returns {system: {label: count}} with every label present.
    """
    tallies = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            system, _example, label = parts
            if label not in FAITH_LABELS:
                raise ValueError(f"line {lineno}: unknown label {label!r}")
            counts = tallies.setdefault(system, {lb: 0 for lb in FAITH_LABELS})
            counts[label] += 1
    return tallies
