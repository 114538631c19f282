"""Text normalization, vocabulary, batching and corpus statistics.

Input is pre-tokenized text: one sentence per line, space separated.
The parallel corpus is a UTF-8 TSV with columns source<TAB>target; fact
descriptions live in a sibling file aligned by line number, descriptions
joined by " ||| ".
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from collections import Counter

import numpy as np

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<s>", "</s>", "|||"
SPECIALS = (PAD, UNK, BOS, EOS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)
FACT_JOINER = " ||| "

_DIGIT_RE = re.compile(r"\d")


class MalformedPairError(ValueError):
    pass


def normalize_token(token):
    return _DIGIT_RE.sub("#", token.lower())


def normalize_text(tokens):
    """Lowercase and mask every decimal digit with '#'; count preserved."""
    return [normalize_token(t) for t in tokens]


class Vocab:
    """Bidirectional token<->id map with reserved specials at ids 0..4."""

    def __init__(self, tokens=()):
        self.id_to_token = list(SPECIALS)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        for tok in tokens:
            self._add(tok)
        self.pad_id, self.unk_id, self.bos_id, self.eos_id, self.sep_id = range(5)

    def _add(self, tok):
        if tok in self.token_to_id:
            raise ValueError(f"duplicate vocab token {tok!r}")
        self.token_to_id[tok] = len(self.id_to_token)
        self.id_to_token.append(tok)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, tok):
        return tok in self.token_to_id

    def lookup(self, tok):
        return self.token_to_id.get(tok, 1)

    def encode(self, tokens):
        return [self.token_to_id.get(t, 1) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        # one non-special token per line, line number = id - len(SPECIALS)
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(SPECIALS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def build_vocab(corpus, min_freq=5, max_size=None):
    """Vocab of tokens seen >= min_freq times, most frequent first.

    ``corpus`` is an iterable of token sequences.  The content list is
    truncated to ``max_size`` entries by descending frequency, ties broken
    lexicographically; specials are always present on top of that.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts = Counter()
    for tokens in corpus:
        counts.update(t for t in tokens if t not in SPECIALS)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    if max_size is not None:
        kept = kept[:max_size]
    return Vocab(kept)


@dataclass
class ParallelPair:
    """One normalized (sentence, fact sequence, headline) example."""

    source: list
    facts: list  # flattened fact tokens, SEP markers included
    target: list


def load_pairs(pairs_path, facts_path=None):
    """Read the TSV corpus plus the aligned facts file (may be absent)."""
    pairs = []
    fact_lines = None
    if facts_path is not None:
        with open(facts_path, encoding="utf-8") as fh:
            fact_lines = [line.rstrip("\n") for line in fh]
    with open(pairs_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise MalformedPairError(
                    f"{pairs_path}:{lineno + 1}: expected source<TAB>target"
                )
            source = normalize_text(cols[0].split())
            target = normalize_text(cols[1].split())
            facts = []
            if fact_lines is not None and lineno < len(fact_lines):
                facts = parse_fact_line(fact_lines[lineno])
            pairs.append(ParallelPair(source, facts, target))
    return pairs


def parse_fact_line(line):
    """Flatten 'f1 ||| f2' into normalized tokens with SEP markers."""
    line = line.strip()
    if not line:
        return []
    out = []
    for i, desc in enumerate(line.split(FACT_JOINER)):
        if i:
            out.append(SEP)
        out.extend(normalize_text(desc.split()))
    return out


@dataclass
class Batch:
    """Padded id matrices plus masks; gamma is 0 exactly at SEP positions."""

    source_ids: np.ndarray
    fact_ids: np.ndarray
    target_ids: np.ndarray  # BOS ... EOS
    source_mask: np.ndarray
    fact_mask: np.ndarray
    target_mask: np.ndarray
    gamma: np.ndarray

    def __len__(self):
        return self.source_ids.shape[0]


def _pad_rows(rows, pad_id):
    width = max((len(r) for r in rows), default=0)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return ids, mask


def encode_batch(pairs, src_vocab, tgt_vocab):
    """Encode a list of pairs into one padded Batch."""
    src_rows, fact_rows, tgt_rows = [], [], []
    for pair in pairs:
        if not pair.source:
            raise MalformedPairError("empty source sentence")
        if not pair.target:
            raise MalformedPairError("empty target summary")
        src_rows.append(src_vocab.encode(pair.source))
        fact_rows.append(src_vocab.encode(pair.facts))
        tgt_rows.append(
            [tgt_vocab.bos_id] + tgt_vocab.encode(pair.target) + [tgt_vocab.eos_id]
        )
    source_ids, source_mask = _pad_rows(src_rows, src_vocab.pad_id)
    fact_ids, fact_mask = _pad_rows(fact_rows, src_vocab.pad_id)
    target_ids, target_mask = _pad_rows(tgt_rows, tgt_vocab.pad_id)
    gamma = (fact_ids != src_vocab.sep_id).astype(np.float64)
    return Batch(
        source_ids, fact_ids, target_ids, source_mask, fact_mask, target_mask, gamma
    )


def make_batches(pairs, src_vocab, tgt_vocab, batch_size, seed):
    """Seeded shuffle, then fixed-size padded batches in corpus order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pairs = list(pairs)
    order = np.random.default_rng(seed).permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    for start in range(0, len(shuffled), batch_size):
        yield encode_batch(shuffled[start : start + batch_size], src_vocab, tgt_vocab)


@dataclass
class CoverageReport:
    covered: int
    total: int

    @property
    def fraction(self):
        return self.covered / self.total if self.total else 0.0


def load_pretrained_embeddings(path, vocab, dim, rng):
    """Read "token v1 .. v_dim" rows into a (|vocab|, dim) matrix.

    Covered rows are copied verbatim; everything else (specials included)
    gets the model's uniform Glorot init.  Coverage counts non-special
    vocab entries only.
    """
    bound = np.sqrt(6.0 / (len(vocab) + dim))
    matrix = rng.uniform(-bound, bound, size=(len(vocab), dim))
    covered = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip("\n").split(" ")
            if len(parts) <= 1:
                continue
            if len(parts) != dim + 1:
                raise ValueError(
                    f"{path}:{lineno + 1}: expected {dim} values, got {len(parts) - 1}"
                )
            tok = parts[0]
            if tok in vocab and tok not in covered:
                matrix[vocab.lookup(tok)] = [float(x) for x in parts[1:]]
                covered.add(tok)
    non_special = len(vocab) - len(SPECIALS)
    n_covered = sum(1 for t in covered if t not in SPECIALS)
    return matrix, CoverageReport(n_covered, non_special)


@dataclass
class CorpusStats:
    avg_source_len: float
    avg_fact_len: float
    avg_fact_count: float
    copy_ratio_source: float
    copy_ratio_fact: float


def _copy_ratio(tokens, summary_types):
    if not tokens:
        return 0.0
    return sum(1 for t in tokens if t in summary_types) / len(tokens)


def corpus_stats(pairs):
    """Macro-averaged lengths, fact counts and copy ratios.

    The copy ratio of a pair is the fraction of its tokens whose type also
    occurs in the summary; fact tokens exclude the SEP markers.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_stats needs a non-empty stream")
    src_len = fact_len = fact_count = copy_src = copy_fact = 0.0
    for pair in pairs:
        fact_tokens = [t for t in pair.facts if t != SEP]
        summary_types = set(pair.target)
        src_len += len(pair.source)
        fact_len += len(fact_tokens)
        n_sep = len(pair.facts) - len(fact_tokens)
        fact_count += n_sep + 1 if pair.facts else 0
        copy_src += _copy_ratio(pair.source, summary_types)
        copy_fact += _copy_ratio(fact_tokens, summary_types)
    n = len(pairs)
    return CorpusStats(
        avg_source_len=src_len / n,
        avg_fact_len=fact_len / n,
        avg_fact_count=fact_count / n,
        copy_ratio_source=copy_src / n,
        copy_ratio_fact=copy_fact / n,
    )
