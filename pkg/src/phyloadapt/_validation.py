"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Iterable, Mapping

from .corpus.generate import LanguageCorpus
from .phylogeny import PhyloTree


def check_corpora(X, *, name: str = "X") -> dict[str, LanguageCorpus]:
    """Normalise a corpus, a list of corpora or an iso mapping into ``{iso: corpus}``."""
    if isinstance(X, LanguageCorpus):
        return {X.iso: X}
    if isinstance(X, Mapping):
        items = list(X.items())
    elif isinstance(X, Iterable) and not isinstance(X, (str, bytes)):
        items = [(c.iso if isinstance(c, LanguageCorpus) else None, c) for c in X]
    else:
        raise TypeError(f"{name} must be a LanguageCorpus, a list of them or an iso mapping, got {type(X).__name__}")
    out: dict[str, LanguageCorpus] = {}
    for iso, corpus in items:
        if not isinstance(corpus, LanguageCorpus):
            raise TypeError(f"{name} holds a {type(corpus).__name__}, expected LanguageCorpus")
        if iso != corpus.iso:
            raise ValueError(f"{name}: key {iso!r} does not match corpus language {corpus.iso!r}")
        if iso in out:
            raise ValueError(f"{name}: language {iso!r} appears twice")
        out[iso] = corpus
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_languages(isos: Iterable[str], tree: PhyloTree, *, what: str = "language") -> list[str]:
    isos = list(isos)
    missing = [x for x in isos if x not in tree]
    if missing:
        raise ValueError(f"{what}(s) not in the tree: {missing}")
    return isos
