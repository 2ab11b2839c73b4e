"""Byte-pair-encoding subword segmentation and vocabulary construction.

Merges are learned per language side on whitespace-tokenized text.  Words
are symbol sequences ending in a separate end-of-word marker; segmented
output marks word-internal boundaries with a trailing "@@" so that
removing "@@ " joints recovers the original text exactly.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

EOW = "</w>"
CONT = "@@"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass
class BpeModel:
    """Ordered merge rules; earlier rules apply first."""

    merges: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                left, right = line.split(" ")
                merges.append((left, right))
        return cls(merges)

    def segment_word(self, word: str) -> tuple[str, ...]:
        """Split one word into subword pieces (without @@ markers)."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word) + [EOW]
        while len(symbols) > 1:
            best = None
            best_rank = len(self.merges)
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair, best_rank)
                if rank < best_rank:
                    best, best_rank = pair, rank
            if best is None:
                break
            symbols = _merge_symbols(symbols, best)
        if symbols[-1] == EOW:
            symbols = symbols[:-1]
        elif symbols[-1].endswith(EOW):
            symbols = symbols[:-1] + [symbols[-1][: -len(EOW)]]
        pieces = tuple(symbols)
        self._cache[word] = pieces
        return pieces


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_bpe(sentences: Iterable[Sequence[str]], num_merges: int) -> BpeModel:
    """Learn merge rules by greedy most-frequent-pair counting.

    Ties break lexicographically on the pair so learning is deterministic.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq: Counter[str] = Counter()
    for sent in sentences:
        word_freq.update(sent)
    if not word_freq:
        raise ValueError("cannot learn BPE from an empty corpus")

    words = {w: list(w) + [EOW] for w in word_freq}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_freq: Counter[tuple[str, str]] = Counter()
        for w, symbols in words.items():
            freq = word_freq[w]
            for pair in zip(symbols, symbols[1:]):
                pair_freq[pair] += freq
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        best = min(p for p, c in pair_freq.items() if c == best_count)
        merges.append(best)
        for w in words:
            words[w] = _merge_symbols(words[w], best)
    return BpeModel(merges)


def apply_bpe(tokens: Sequence[str], model: BpeModel) -> list[str]:
    """Segment a tokenized sentence; non-final pieces carry the @@ marker."""
    out = []
    for word in tokens:
        pieces = model.segment_word(word)
        for piece in pieces[:-1]:
            out.append(piece + CONT)
        out.append(pieces[-1])
    return out


def remove_bpe(tokens: Sequence[str]) -> list[str]:
    """Invert apply_bpe: glue @@-marked pieces back into words."""
    return remove_bpe_text(" ".join(tokens)).split()


def remove_bpe_text(text: str) -> str:
    text = text.replace(CONT + " ", "")
    if text.endswith(CONT):
        text = text[: -len(CONT)]
    return text


class Vocabulary:
    """Token-to-id map with pad/bos/eos/unk reserved at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Sequence[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token in self.tokens[len(RESERVED):]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(segmented_sentences: Iterable[Sequence[str]]) -> Vocabulary:
    """All observed subwords, ordered by frequency then lexicographically."""
    freq: Counter[str] = Counter()
    for sent in segmented_sentences:
        freq.update(sent)
    ordered = sorted(freq, key=lambda t: (-freq[t], t))
    return Vocabulary(ordered)
