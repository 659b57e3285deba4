"""N-gram lexicon extraction by corpus frequency thresholding.

Only n-grams of length >= 2 are kept. Counting is occurrence counting
(overlaps included) over contiguous characters within a line; n-grams
never cross line boundaries. Entry ids are assigned in descending
frequency order with ties broken lexicographically, making them
reproducible for a given corpus and parameters.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

FILE_HEADER_PREFIX = "#zen-lexicon v1"


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class NgramLexicon:
    entries: tuple          # (ngram, frequency) in id order
    n_min: int
    n_max: int
    threshold: int

    def __post_init__(self):
        if self.n_min < 2 or self.n_max < self.n_min or self.threshold < 1:
            raise LexiconError(
                f"invalid bounds n_min={self.n_min} n_max={self.n_max} threshold={self.threshold}")
        seen = set()
        for ngram, freq in self.entries:
            if not self.n_min <= len(ngram) <= self.n_max:
                raise LexiconError(f"entry {ngram!r} outside length bounds")
            if freq < self.threshold:
                raise LexiconError(f"entry {ngram!r} has frequency {freq} below threshold")
            if ngram in seen:
                raise LexiconError(f"duplicate entry {ngram!r}")
            seen.add(ngram)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, ngram: str) -> bool:
        return ngram in self.ids

    @property
    def ids(self) -> dict:
        try:
            return self._ids_cache
        except AttributeError:
            object.__setattr__(self, "_ids_cache", {g: i for i, (g, _) in enumerate(self.entries)})
            return self._ids_cache

    def ngram(self, entry_id: int) -> str:
        return self.entries[entry_id][0]

    def frequency(self, entry_id: int) -> int:
        return self.entries[entry_id][1]

    def size_histogram(self) -> dict:
        """Entry count per n-gram length."""
        hist = Counter(len(g) for g, _ in self.entries)
        return dict(sorted(hist.items()))


def count_ngrams(lines, n_min: int, n_max: int) -> Counter:
    """Occurrence counts of every contiguous n-gram of length n_min..n_max."""
    counts = Counter()
    for line in lines:
        k = len(line)
        for n in range(n_min, n_max + 1):
            if n > k:
                break
            for start in range(k - n + 1):
                counts[line[start:start + n]] += 1
    return counts


def extract(lines, n_min: int = 2, n_max: int = 8, threshold: int = 1) -> NgramLexicon:
    """Two-pass extraction: count all n-grams, then keep those >= threshold."""
    if n_min < 2:
        raise LexiconError(f"n_min must be >= 2, got {n_min}")
    counts = count_ngrams(lines, n_min, n_max)
    kept = sorted((g for g, c in counts.items() if c >= threshold),
                  key=lambda g: (-counts[g], g))
    return NgramLexicon(tuple((g, counts[g]) for g in kept), n_min, n_max, threshold)


def merge_counts(parts) -> Counter:
    """Combine per-shard count tables; equals single-pass counting exactly."""
    total = Counter()
    for part in parts:
        total.update(part)
    return total


def save(lexicon: NgramLexicon, path) -> None:
    """Write the TSV form: header line, then `ngram<TAB>frequency` in id order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{FILE_HEADER_PREFIX} n_min={lexicon.n_min} "
                 f"n_max={lexicon.n_max} threshold={lexicon.threshold}\n")
        for ngram, freq in lexicon.entries:
            fh.write(f"{ngram}\t{freq}\n")


def load(path) -> NgramLexicon:
    """Read a lexicon file; malformed lines fail with their line number."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split()
        if len(fields) != 5 or " ".join(fields[:2]) != FILE_HEADER_PREFIX:
            raise LexiconError(f"{path}:1: unrecognized header {header!r}")
        try:
            meta = dict(f.split("=", 1) for f in fields[2:])
            n_min, n_max, threshold = (int(meta[k]) for k in ("n_min", "n_max", "threshold"))
        except (ValueError, KeyError) as exc:
            raise LexiconError(f"{path}:1: bad header fields: {exc}") from exc

        entries = []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            parts = line.split("\t")
            if len(parts) != 2:
                raise LexiconError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(parts)}")
            ngram, freq_text = parts
            try:
                freq = int(freq_text)
            except ValueError:
                raise LexiconError(f"{path}:{lineno}: frequency {freq_text!r} is not an integer") from None
            if freq < threshold:
                raise LexiconError(f"{path}:{lineno}: frequency {freq} below threshold {threshold}")
            entries.append((ngram, freq))
    try:
        return NgramLexicon(tuple(entries), n_min, n_max, threshold)
    except LexiconError as exc:
        raise LexiconError(f"{path}: {exc}") from exc


def from_ngrams(ngrams, lines, n_min: int = 2, n_max: int = 8) -> NgramLexicon:
    """Lexicon over a fixed n-gram inventory with frequencies counted in `lines`.

    Used when the entry set comes from elsewhere (e.g. a known phrase list)
    rather than thresholded extraction. Inventory entries absent from the
    corpus are counted once so they remain admissible at threshold 1.
    """
    wanted = set(ngrams)
    counts = count_ngrams(lines, n_min, n_max)
    kept = sorted(wanted, key=lambda g: (-max(counts[g], 1), g))
    return NgramLexicon(tuple((g, max(counts[g], 1)) for g in kept), n_min, n_max, 1)
