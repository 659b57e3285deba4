"""Text normalization, character vocabulary, and pretraining instances.

Tokens are single Unicode scalar values; there is no subword splitting.
Sentence corpora are plain UTF-8 text, one sentence per line, with a blank
line between documents.
"""

from __future__ import annotations

import random
import unicodedata
from collections import Counter
from dataclasses import dataclass, field

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
RESERVED_TOKENS = (PAD, CLS, SEP, MASK, UNK)

PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

# Normalization removal table, v1. Characters whose Unicode category is
# listed here are dropped; everything else passes through lowercased.
# Cc/Cf cover control and format characters (zero-width joiners, BOM),
# Cs/Co surrogates and private use, Zl/Zp the line/paragraph separators.
NORMALIZE_TABLE_VERSION = 1
REMOVED_CATEGORIES = frozenset({"Cc", "Cf", "Cs", "Co", "Zl", "Zp"})


def normalize(text: str) -> str:
    """Lowercase and strip characters in the removal table. Total function."""
    lowered = text.lower()
    return "".join(ch for ch in lowered if unicodedata.category(ch) not in REMOVED_CATEGORIES)


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Character-to-id table with the five reserved tokens at ids 0-4."""

    id_to_token: tuple
    token_to_id: dict = field(repr=False)

    @staticmethod
    def from_tokens(tokens) -> "Vocab":
        id_to_token = RESERVED_TOKENS + tuple(tokens)
        token_to_id = {}
        for i, tok in enumerate(id_to_token):
            if tok in token_to_id:
                raise VocabError(f"duplicate token {tok!r}")
            token_to_id[tok] = i
        return Vocab(id_to_token, token_to_id)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, chars) -> list:
        """Map characters (or special-token strings) to ids; unknown chars to UNK."""
        return [self.token_to_id.get(c, UNK_ID) for c in chars]

    def decode(self, ids) -> list:
        return [self.id_to_token[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @staticmethod
    def load(path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tuple(tokens[:5]) != RESERVED_TOKENS:
            raise VocabError(f"vocab file {path} does not start with the reserved tokens")
        return Vocab.from_tokens(tokens[5:])


def build_vocab(lines, min_count: int = 1) -> Vocab:
    """Count characters over normalized lines and keep those seen >= min_count.

    Ordering is descending frequency with ties broken by codepoint, so the
    same corpus always yields the same ids.
    """
    counts = Counter()
    for line in lines:
        counts.update(line)
    kept = sorted((c for c, n in counts.items() if n >= min_count),
                  key=lambda c: (-counts[c], c))
    return Vocab.from_tokens(kept)


def read_corpus(path) -> list:
    """Read a sentence-per-line corpus into documents (lists of lines)."""
    docs = []
    current = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line:
                current.append(line)
            elif current:
                docs.append(current)
                current = []
    if current:
        docs.append(current)
    return docs


@dataclass(frozen=True)
class PretrainInstance:
    """One [CLS] a [SEP] b [SEP] training instance with masking applied.

    token_ids hold the corrupted sequence; mlm_labels remember the original
    id at each masked position. original_tokens keeps the uncorrupted token
    strings so n-gram matching can run on the text as written.
    """

    token_ids: tuple
    segment_ids: tuple
    mask_positions: tuple
    mlm_labels: tuple
    is_next: bool
    original_tokens: tuple

    def __len__(self) -> int:
        return len(self.token_ids)


def truncate_pair(a: str, b: str, budget: int) -> tuple:
    """Trim the longer segment from its tail until len(a)+len(b) <= budget."""
    a, b = list(a), list(b)
    while len(a) + len(b) > budget:
        longer = a if len(a) >= len(b) else b
        longer.pop()
    return "".join(a), "".join(b)


def make_instance(sent_a: str, sent_b: str, is_next: bool, vocab: Vocab,
                  mask_rate: float = 0.15, rng: random.Random = None,
                  max_len: int = 128) -> PretrainInstance:
    """Build a masked sentence-pair instance, fully determined by `rng`.

    round(mask_rate * maskable) positions are chosen among the non-special
    tokens, with a floor of one so the recovery loss is always defined. Of
    the chosen positions 80% become [MASK], 10% a random non-special vocab
    id, 10% stay unchanged (but are still predicted).
    """
    if rng is None:
        rng = random.Random(0)
    sent_a, sent_b = truncate_pair(sent_a, sent_b, max_len - 3)
    if not sent_a or not sent_b:
        raise ValueError("make_instance: empty segment after truncation")

    tokens = [CLS] + list(sent_a) + [SEP] + list(sent_b) + [SEP]
    segment_ids = [0] * (len(sent_a) + 2) + [1] * (len(sent_b) + 1)
    token_ids = vocab.encode(tokens)

    maskable = [i for i, t in enumerate(tokens) if t not in (CLS, SEP)]
    n_masks = max(1, round(mask_rate * len(maskable)))
    positions = sorted(rng.sample(maskable, min(n_masks, len(maskable))))

    non_special = range(len(RESERVED_TOKENS), len(vocab))
    labels = []
    for pos in positions:
        labels.append(token_ids[pos])
        roll = rng.random()
        if roll < 0.8:
            token_ids[pos] = MASK_ID
        elif roll < 0.9 and len(non_special) > 0:
            token_ids[pos] = rng.randrange(non_special.start, non_special.stop)
        # else: keep the original token

    return PretrainInstance(
        token_ids=tuple(token_ids),
        segment_ids=tuple(segment_ids),
        mask_positions=tuple(positions),
        mlm_labels=tuple(labels),
        is_next=is_next,
        original_tokens=tuple(tokens),
    )
