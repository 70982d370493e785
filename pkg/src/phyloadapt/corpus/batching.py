"""Single-language batches, token-count upsampling and MLM masking."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from .._rng import derive_rng
from .generate import LanguageCorpus
from .vocab import CLS, MASK, NUM_SPECIAL, PAD, SEP, Vocab, special_mask  # noqa: F401

IGNORE_INDEX = -100


@dataclass
class TokenBatch:
    ids: np.ndarray
    attention_mask: np.ndarray
    iso: str
    labels: np.ndarray | None = None
    rows: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def word_lengths(self) -> np.ndarray:
        return self.attention_mask.sum(axis=1) - 2


def encode_batch(vocab: Vocab, sentences: Sequence[Sequence[str]], iso: str, max_len: int | None = None, rows=None) -> TokenBatch:
    """``[CLS] w1 .. wn [SEP]`` per row, right-padded to the longest row."""
    enc = []
    for s in sentences:
        ids = vocab.encode(s)
        if max_len is not None and len(ids) > max_len - 2:
            ids = ids[: max_len - 2]
        enc.append([CLS] + ids + [SEP])
    width = max(len(e) for e in enc)
    out = np.full((len(enc), width), PAD, dtype=np.int64)
    for i, e in enumerate(enc):
        out[i, : len(e)] = e
    rows = None if rows is None else np.asarray(rows, dtype=np.int64)
    return TokenBatch(out, out != PAD, iso, None, rows)


def upsample_factors(corpora: Mapping[str, LanguageCorpus], high_resource=()) -> dict[str, float]:
    """Per-language factors inversely proportional to token count.

    The normalisation puts the smallest factor among upsampled languages at 1.
    Languages in ``high_resource`` are left at 1.
    """
    excluded = set(high_resource)
    counts = {iso: c.token_count for iso, c in corpora.items()}
    for iso, n in counts.items():
        if iso not in excluded and n <= 0:
            raise ValueError(f"language {iso!r} has no tokens; cannot compute an upsampling factor")
    pool = [n for iso, n in counts.items() if iso not in excluded]
    top = max(pool) if pool else 1
    return {iso: 1.0 if iso in excluded else top / n for iso, n in counts.items()}


def selection_probabilities(corpora: Mapping[str, LanguageCorpus], factors: Mapping[str, float] | None = None) -> dict[str, float]:
    langs = sorted(corpora)
    w = np.array([(1.0 if factors is None else factors[x]) * corpora[x].token_count for x in langs], dtype=float)
    if w.sum() <= 0:
        raise ValueError("no tokens to sample from")
    return dict(zip(langs, w / w.sum()))


def batch_stream(
    corpora: Mapping[str, LanguageCorpus],
    factors: Mapping[str, float] | None,
    batch_size: int,
    seed: int,
    vocab: Vocab,
    max_len: int | None = None,
) -> Iterator[TokenBatch]:
    """Endless reproducible stream of batches, each drawn from one language.

    A step picks a language with probability proportional to
    ``factor * token_count`` and then samples sentences from it uniformly with
    replacement.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    probs = selection_probabilities(corpora, factors)
    langs = list(probs)
    p = np.array([probs[x] for x in langs])
    rng = derive_rng(seed, "batch-stream")
    while True:
        iso = langs[int(rng.choice(len(langs), p=p))]
        corpus = corpora[iso]
        rows = rng.integers(0, len(corpus.sentences), size=batch_size)
        yield encode_batch(vocab, [corpus.sentences[r] for r in rows], iso, max_len, rows)


def apply_mlm_mask(batch: TokenBatch, mask_prob: float, rng, vocab_size: int) -> TokenBatch:
    """BERT-style corruption: select each ordinary token with ``mask_prob``;
    of the selected, 80% become MASK, 10% a random ordinary token, 10% stay.

    ``rng`` may be a seed or a ``numpy.random.Generator``.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError("mask_prob must lie in (0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = derive_rng(int(rng), "mlm-mask")
    ids = batch.ids
    eligible = ~special_mask(ids)
    selected = eligible & (rng.random(ids.shape) < mask_prob)
    labels = np.where(selected, ids, IGNORE_INDEX)
    roll = rng.random(ids.shape)
    random_tokens = rng.integers(NUM_SPECIAL, vocab_size, size=ids.shape)
    new_ids = ids.copy()
    new_ids[selected & (roll < 0.8)] = MASK
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    new_ids[swap] = random_tokens[swap]
    return replace(batch, ids=new_ids, labels=labels)

