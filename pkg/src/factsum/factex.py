"""Fact-description extraction from relation triples and dependency parses.

Triples and parses are ingested from external-tool output files; this
module only post-processes them: redundancy pruning, tuple filtering by
dependency label, merging tuples that share words, and screening of bare
reporting clauses ("somebody said").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from collections import Counter
from typing import NamedTuple

from .corpus import FACT_JOINER, normalize_token

# Predicate-related labels plus the modifier labels worth keeping.  The
# temporal/adverbial labels are included so that modifiers like a trailing
# weekday attach to the predicate's fact.
DEFAULT_LABELS = frozenset(
    {
        "nsubj",
        "nsubjpass",
        "csubj",
        "csubjpass",
        "dobj",
        "amod",
        "nummod",
        "compound",
        "advmod",
        "nmod:tmod",
        "obl:tmod",
    }
)

# Bare "somebody said" clauses carry no summarizable content.
REPORTING_VERBS = frozenset(
    {
        "said",
        "say",
        "says",
        "declared",
        "declare",
        "declares",
        "announced",
        "announce",
        "announces",
    }
)


class IndexedToken(NamedTuple):
    index: int
    form: str


@dataclass
class Triple:
    """(subject; predicate; object) from an open IE system; object may be empty."""

    subject: list
    predicate: list
    object: list

    def __post_init__(self):
        if not self.subject or not self.predicate:
            raise ValueError("triple needs a non-empty subject and predicate")

    def words(self):
        return [t.form for t in self.subject + self.predicate + self.object]

    def __str__(self):
        parts = [" ".join(t.form for t in part) for part in
                 (self.subject, self.predicate, self.object)]
        return f"({parts[0]}; {parts[1]}; {parts[2]})" if self.object else \
            f"({parts[0]}; {parts[1]}; )"


def _coerce_tokens(items):
    """Accept "word" or {"form": ..., "index": ...} JSON items."""
    out = []
    for item in items:
        if isinstance(item, str):
            out.append(IndexedToken(-1, item))
        else:
            out.append(IndexedToken(int(item.get("index", -1)), item["form"]))
    return out


def load_triples(path):
    """JSON-lines reader: one {"id": n, "triples": [...]} record per sentence."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            triples = [
                Triple(
                    _coerce_tokens(t["subject"]),
                    _coerce_tokens(t["predicate"]),
                    _coerce_tokens(t.get("object", [])),
                )
                for t in rec.get("triples", [])
            ]
            records.append((rec.get("id", len(records)), triples))
    records.sort(key=lambda r: r[0])
    return [triples for _, triples in records]


@dataclass
class DepTree:
    """Parsed sentence: (1-based index, form, head index or 0, label) rows."""

    tokens: list  # of (index, form, head, label)

    def __post_init__(self):
        n = len(self.tokens)
        roots = 0
        for idx, _form, head, _label in self.tokens:
            if not (1 <= idx <= n) or not (0 <= head <= n):
                raise ValueError(f"token/head index out of range: {idx}->{head}")
            if head == 0:
                roots += 1
        if n and roots != 1:
            raise ValueError(f"expected a single root, found {roots}")
        self._check_acyclic()

    def _check_acyclic(self):
        heads = {idx: head for idx, _f, head, _l in self.tokens}
        for start in heads:
            seen = set()
            node = start
            while node != 0:
                if node in seen:
                    raise ValueError(f"dependency cycle through token {start}")
                seen.add(node)
                node = heads[node]

    def form(self, index):
        return self.tokens[index - 1][1]


class DepTuple(NamedTuple):
    governor: IndexedToken
    dependent: IndexedToken
    label: str


@dataclass
class FactDesc:
    """Merged fact tokens in source order; forms are normalized."""

    tokens: list  # of IndexedToken, strictly increasing indices

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("empty fact description")
        idxs = [t.index for t in self.tokens]
        if any(b <= a for a, b in zip(idxs, idxs[1:])):
            raise ValueError(f"fact indices must strictly increase: {idxs}")

    def forms(self):
        return [t.form for t in self.tokens]

    def text(self):
        return " ".join(self.forms())


@dataclass
class FactSeq:
    """Ordered fact descriptions; flattens with a SEP token between facts."""

    facts: list = field(default_factory=list)

    def flattened(self):
        out = []
        for i, fact in enumerate(self.facts):
            if i:
                out.append("|||")
            out.extend(fact.forms())
        return out

    def text(self):
        return FACT_JOINER.join(f.text() for f in self.facts)


def parse_conllu(path):
    """Read a CoNLL-U-like TSV into DepTrees; blank line ends a sentence.

    Ten-or-more column rows are treated as standard CoNLL-U (ID, FORM at
    0-1 and HEAD, DEPREL at 6-7); four-column rows as bare
    ID FORM HEAD DEPREL.  Comment and multi-word/empty-node rows are
    skipped.
    """
    trees = []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                if rows:
                    trees.append(DepTree(rows))
                    rows = []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if not cols[0].isdigit():
                continue  # ranges like 3-4 and decimals like 5.1
            if len(cols) >= 8:
                idx, form, head, label = cols[0], cols[1], cols[6], cols[7]
            elif len(cols) == 4:
                idx, form, head, label = cols
            else:
                raise ValueError(f"{path}: unparsable dependency row: {line!r}")
            rows.append((int(idx), form, int(head), label))
    if rows:
        trees.append(DepTree(rows))
    return trees


def _word_multiset(words):
    return Counter(normalize_token(w) for w in words)


def _covered(small: Counter, big: Counter):
    return all(big[w] >= c for w, c in small.items())


def dedup_triples(triples):
    """Drop every triple whose words are covered by another retained one.

    Coverage is multiset containment over normalized surface forms; among
    identical multisets the earliest triple is retained.  Output keeps the
    input order of the survivors.
    """
    sets = [_word_multiset(t.words()) for t in triples]
    order = sorted(range(len(triples)), key=lambda i: (-sum(sets[i].values()), i))
    kept = []
    for i in order:
        if not any(_covered(sets[i], sets[j]) for j in kept):
            kept.append(i)
    kept.sort()
    return [triples[i] for i in kept]


def triple_to_fact(triple):
    """Join subject + predicate + object into one fact description.

    The triple's own token indices are used when they are present and
    already increase along the concatenation; otherwise positions are
    assigned in concatenation order.
    """
    toks = triple.subject + triple.predicate + triple.object
    idxs = [t.index for t in toks]
    if any(i < 0 for i in idxs) or any(b <= a for a, b in zip(idxs, idxs[1:])):
        idxs = range(1, len(toks) + 1)
    return FactDesc(
        [IndexedToken(i, normalize_token(t.form)) for i, t in zip(idxs, toks)]
    )


def extract_dep_tuples(tree, label_set=DEFAULT_LABELS):
    """(governor, dependent) pairs whose label is configured, by dependent index."""
    out = []
    for idx, form, head, label in sorted(tree.tokens):
        if head == 0 or label not in label_set:
            continue
        gov = IndexedToken(head, tree.form(head))
        dep = IndexedToken(idx, form)
        out.append(DepTuple(gov, dep, label))
    return out


def merge_tuples(tuples):
    """Merge tuples sharing a token into facts, words in sentence order.

    Tuples are edges over token indices; each connected component becomes
    one fact.  Facts are ordered by their smallest token index.
    """
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    forms = {}
    for gov, dep, _label in tuples:
        for tok in (gov, dep):
            parent.setdefault(tok.index, tok.index)
            forms[tok.index] = tok.form
        parent[find(gov.index)] = find(dep.index)

    components = {}
    for idx in parent:
        components.setdefault(find(idx), []).append(idx)
    facts = []
    for comp in components.values():
        comp.sort()
        facts.append(
            FactDesc([IndexedToken(i, normalize_token(forms[i])) for i in comp])
        )
    facts.sort(key=lambda f: f.tokens[0].index)
    return facts


def filter_reporting(facts, enabled=True, lexicon=REPORTING_VERBS):
    """Screen out bare reporting facts: the final token is a reporting verb.

    Facts keep source order, so a trailing verb means everything before it
    is subject material and there is no object; facts with object words
    after the verb are untouched.
    """
    if not enabled:
        return list(facts)
    return [f for f in facts if normalize_token(f.tokens[-1].form) not in lexicon]


def assemble_fact_sequence(triple_facts, dep_facts):
    """Combine triple- and dependency-derived facts into one sequence.

    Triple facts come first.  A dependency fact is dropped when its word
    multiset is covered by a triple fact (the dedup_triples rule applied
    across the two sources).
    """
    triple_sets = [_word_multiset(f.forms()) for f in triple_facts]
    kept = list(triple_facts)
    for fact in dep_facts:
        fs = _word_multiset(fact.forms())
        if not any(_covered(fs, ts) for ts in triple_sets):
            kept.append(fact)
    return FactSeq(kept)


def extract_facts(triples, tree, label_set=DEFAULT_LABELS, reporting_filter=True):
    """Full per-sentence pipeline; either source may be missing (None/[])."""
    triple_facts = [triple_to_fact(t) for t in dedup_triples(triples or [])]
    dep_facts = merge_tuples(extract_dep_tuples(tree, label_set)) if tree else []
    seq = assemble_fact_sequence(triple_facts, dep_facts)
    return FactSeq(filter_reporting(seq.facts, enabled=reporting_filter))
