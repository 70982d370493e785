from .batching import (
    IGNORE_INDEX,
    TokenBatch,
    apply_mlm_mask,
    batch_stream,
    encode_batch,
    selection_probabilities,
    upsample_factors,
)
from .generate import (
    NLI_LABELS,
    TAGS,
    FamilyGenSpec,
    LanguageCorpus,
    edit_distance,
    evolve,
    generate_family,
    lexicon_distance,
    load_genspec,
)
from .io import read_corpus, write_corpus, write_nli
from .vocab import CLS, MASK, PAD, SEP, SPECIAL_TOKENS, UNK, Vocab, build_vocab

__all__ = [
    "CLS",
    "IGNORE_INDEX",
    "MASK",
    "NLI_LABELS",
    "PAD",
    "SEP",
    "SPECIAL_TOKENS",
    "TAGS",
    "UNK",
    "FamilyGenSpec",
    "LanguageCorpus",
    "TokenBatch",
    "Vocab",
    "apply_mlm_mask",
    "batch_stream",
    "build_vocab",
    "edit_distance",
    "encode_batch",
    "evolve",
    "generate_family",
    "lexicon_distance",
    "load_genspec",
    "read_corpus",
    "selection_probabilities",
    "upsample_factors",
    "write_corpus",
    "write_nli",
]
