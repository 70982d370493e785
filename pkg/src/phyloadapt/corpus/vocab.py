from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .generate import LanguageCorpus

PAD, UNK, MASK, CLS, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]")
NUM_SPECIAL = len(SPECIAL_TOKENS)


@dataclass
class Vocab:
    """Word-level vocabulary; ids 0..4 are the reserved PAD, UNK, MASK, CLS, SEP."""

    tokens: list[str]

    def __post_init__(self) -> None:
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocab entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def coverage(self, corpus: LanguageCorpus) -> float:
        """Fraction of running tokens that are in-vocabulary."""
        total = corpus.token_count
        hits = sum(w in self.index for s in corpus.sentences for w in s)
        return hits / total if total else 0.0

    def to_dict(self) -> dict:
        return {"format": "phyloadapt-vocab/1", "tokens": self.tokens}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Vocab":
        return cls(list(doc["tokens"]))


def build_vocab(corpora: Mapping[str, LanguageCorpus] | Iterable[LanguageCorpus], min_freq: int = 1) -> Vocab:
    """Union vocabulary over every language in the mix, most frequent first.

    Words seen fewer than ``min_freq`` times are left out and encode as UNK.
    """
    items = corpora.values() if isinstance(corpora, Mapping) else corpora
    counts: Counter[str] = Counter()
    n = 0
    for corpus in items:
        n += 1
        for sent in corpus.sentences:
            counts.update(sent)
        for pair in corpus.nli or ():
            counts.update(pair["premise"])
            counts.update(pair["hypothesis"])
    if n == 0:
        raise ValueError("build_vocab needs at least one corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIAL_TOKENS) + kept)


def special_mask(ids: np.ndarray) -> np.ndarray:
    return (ids == PAD) | (ids == CLS) | (ids == SEP) | (ids == MASK)
