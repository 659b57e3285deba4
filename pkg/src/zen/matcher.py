"""Per-instance n-gram occurrence matching and the binary matching matrix.

An occurrence is one span of an instance spelling a lexicon entry. Repeated
n-grams yield one column per occurrence, all sharing the same lexicon id
(and therefore the same embedding row); this keeps every column of the
matching matrix contiguous.

Matching walks a trie of lexicon entries from every start position inside
runs of ordinary characters. Special tokens ([CLS], [SEP], [PAD], [MASK])
and anything that is not a single character act as run boundaries, so a
span can never cover them or cross from segment a into segment b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RESERVED_TOKENS
from .lexicon import NgramLexicon


@dataclass(frozen=True)
class NgramOccurrence:
    lexicon_id: int
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def covers(self, position: int) -> bool:
        return self.start <= position < self.stop


@dataclass(frozen=True)
class MatchState:
    """Occurrence list plus the k_c x k_n {0,1} matrix aligned with it."""

    occurrences: tuple
    matrix: np.ndarray

    @property
    def k_n(self) -> int:
        return len(self.occurrences)

    @property
    def k_c(self) -> int:
        return self.matrix.shape[0]


class Trie:
    """Prefix tree over lexicon entries; terminals carry the entry id."""

    __slots__ = ("children", "entry_id")

    def __init__(self):
        self.children = {}
        self.entry_id = None

    @staticmethod
    def build(lexicon: NgramLexicon) -> "Trie":
        root = Trie()
        for entry_id, (ngram, _) in enumerate(lexicon.entries):
            node = root
            for ch in ngram:
                node = node.children.setdefault(ch, Trie())
            node.entry_id = entry_id
        return root


_TRIE_CACHE = {}


def _trie_for(lexicon: NgramLexicon) -> Trie:
    key = id(lexicon)
    cached = _TRIE_CACHE.get(key)
    if cached is None or cached[0] is not lexicon:
        cached = (lexicon, Trie.build(lexicon))
        _TRIE_CACHE.clear()
        _TRIE_CACHE[key] = cached
    return cached[1]


def _char_runs(tokens) -> list:
    """Maximal [start, stop) ranges of ordinary single-character tokens."""
    runs = []
    start = None
    for i, tok in enumerate(tokens):
        ordinary = len(tok) == 1 and tok not in RESERVED_TOKENS
        if ordinary and start is None:
            start = i
        elif not ordinary and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(tokens)))
    return runs


def _matrix_for(occurrences, k_c: int) -> np.ndarray:
    m = np.zeros((k_c, len(occurrences)), dtype=np.int8)
    for j, occ in enumerate(occurrences):
        m[occ.start:occ.stop, j] = 1
    return m


def match(tokens, lexicon: NgramLexicon, max_ngrams: int = 128) -> MatchState:
    """Find every lexicon occurrence in an instance and build its matrix.

    All spans of all lengths are reported, overlaps included, in scan order
    (by start, then length). When more than max_ngrams occurrences exist,
    the kept set is chosen by priority: longer first, then higher corpus
    frequency, then smaller start index; kept columns stay in scan order.
    """
    trie = _trie_for(lexicon)
    found = []
    for run_start, run_stop in _char_runs(tokens):
        for start in range(run_start, run_stop):
            node = trie
            for pos in range(start, run_stop):
                node = node.children.get(tokens[pos])
                if node is None:
                    break
                if node.entry_id is not None:
                    found.append(NgramOccurrence(node.entry_id, start, pos - start + 1))
    found.sort(key=lambda o: (o.start, o.length))

    if len(found) > max_ngrams:
        ranked = sorted(range(len(found)),
                        key=lambda i: (-found[i].length,
                                       -lexicon.frequency(found[i].lexicon_id),
                                       found[i].start))
        keep = sorted(ranked[:max_ngrams])
        found = [found[i] for i in keep]

    return MatchState(tuple(found), _matrix_for(found, len(tokens)))


def exclude_masked(state: MatchState, mask_positions) -> MatchState:
    """Drop occurrences whose span covers any masked position.

    Remaining columns keep their relative order; the operation is
    idempotent and order-independent over disjoint mask sets.
    """
    masked = set(mask_positions)
    if not masked:
        return state
    kept = tuple(o for o in state.occurrences if not any(o.covers(p) for p in masked))
    if len(kept) == len(state.occurrences):
        return state
    return MatchState(kept, _matrix_for(kept, state.k_c))


def dump_tsv(state: MatchState, lexicon: NgramLexicon) -> str:
    """Debug dump: occurrence rows, then the dense 0/1 matrix block."""
    lines = ["id\tstart\tlength\tngram"]
    for occ in state.occurrences:
        lines.append(f"{occ.lexicon_id}\t{occ.start}\t{occ.length}\t{lexicon.ngram(occ.lexicon_id)}")
    lines.append("#matrix")
    for row in state.matrix:
        lines.append("\t".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
