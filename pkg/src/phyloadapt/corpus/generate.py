"""Synthetic language families evolved down a phylogenetic tree.

A proto-lexicon and a proto word order are sampled once per family. Every tree
edge then mutates phonemes at the edge's rate, replaces a few words outright,
and occasionally flips a word-order parameter. Sentences come from a small
clause grammar whose expansions carry gold POS tags and dependency heads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from .._rng import derive_rng
from ..phylogeny import FAMILY, GENUS, LANGUAGE, ROOT, PhyloTree, parse_tree

CONSONANTS = tuple("ptkbdgmnslrvfhjw")
VOWELS = tuple("aeiou")

TAGS = ("DET", "ADJ", "NOUN", "PRON", "VERB", "ADP", "ADV", "PART")
OPEN_CLASS_SHARE = {"NOUN": 0.5, "VERB": 0.25, "ADJ": 0.17, "ADV": 0.08}
CLOSED_CLASS_SIZE = {"DET": 4, "ADP": 5, "PRON": 6, "PART": 1}
ORDER_PARAMS = ("sv", "vo", "adj_noun", "det_noun", "prep", "adv_pre", "neg_pre")
NLI_LABELS = ("entailment", "neutral", "contradiction")
GEN_FORMAT = "phyloadapt-genspec/1"


@dataclass
class LanguageCorpus:
    iso: str
    sentences: list[list[str]]
    pos: list[list[str]] | None = None
    heads: list[list[int]] | None = None
    nli: list[dict] | None = None
    provenance: dict = field(default_factory=dict)
    lexicon: dict[str, list[str]] | None = None
    order: dict[str, bool] | None = None

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def __len__(self) -> int:
        return len(self.sentences)

    def has(self, task: str) -> bool:
        if task == "pos":
            return self.pos is not None
        if task == "dep":
            return self.heads is not None
        if task == "nli":
            return bool(self.nli)
        if task == "mlm":
            return bool(self.sentences)
        raise ValueError(f"unknown task {task!r}")


@dataclass
class FamilyGenSpec:
    """Generator parameters for one family.

    Rates are per-phoneme substitution probabilities applied on each edge of the
    given kind (``family``: proto to family node, ``genus``: family to genus,
    ``language``: genus to leaf). ``edge_rates`` overrides individual edges by
    child node id.
    """

    tree: PhyloTree
    proto_lexicon_size: int = 120
    rates: dict[str, float] = field(default_factory=lambda: {"family": 0.0, "genus": 0.25, "language": 0.08})
    edge_rates: dict[str, float] = field(default_factory=dict)
    replacement_rate: dict[str, float] = field(default_factory=lambda: {"family": 0.0, "genus": 0.05, "language": 0.02})
    order_flip: dict[str, float] = field(default_factory=lambda: {"family": 0.0, "genus": 0.35, "language": 0.05})
    proto_order: dict[str, bool] | None = None
    order_overrides: dict[str, dict[str, bool]] = field(default_factory=dict)
    sentence_counts: dict[str, int] = field(default_factory=dict)
    default_sentences: int = 500
    eval_sentences: int = 100
    nli_languages: list[str] = field(default_factory=list)
    nli_pairs: int = 300
    zipf_exponent: float = 1.0
    max_words: int = 14

    def __post_init__(self) -> None:
        for table in (self.rates, self.replacement_rate, self.order_flip):
            for k, v in table.items():
                if not 0.0 <= float(v) <= 1.0:
                    raise ValueError(f"rate {k}={v} outside [0, 1]")
        for k, v in self.edge_rates.items():
            if not 0.0 <= float(v) <= 1.0:
                raise ValueError(f"edge rate {k}={v} outside [0, 1]")
        if self.proto_lexicon_size < len(OPEN_CLASS_SHARE):
            raise ValueError("proto_lexicon_size too small")
        unknown = set(self.sentence_counts) - set(self.tree.languages)
        if unknown:
            raise ValueError(f"sentence counts for languages not in the tree: {sorted(unknown)}")

    def count(self, iso: str, split: str) -> int:
        if split == "train":
            return int(self.sentence_counts.get(iso, self.default_sentences))
        return int(self.eval_sentences)

    def to_dict(self) -> dict:
        return {
            "format": GEN_FORMAT,
            "tree": self.tree.to_dict(),
            "proto_lexicon_size": self.proto_lexicon_size,
            "rates": dict(self.rates),
            "edge_rates": dict(self.edge_rates),
            "replacement_rate": dict(self.replacement_rate),
            "order_flip": dict(self.order_flip),
            "proto_order": self.proto_order,
            "order_overrides": self.order_overrides,
            "sentence_counts": dict(self.sentence_counts),
            "default_sentences": self.default_sentences,
            "eval_sentences": self.eval_sentences,
            "nli_languages": list(self.nli_languages),
            "nli_pairs": self.nli_pairs,
            "zipf_exponent": self.zipf_exponent,
            "max_words": self.max_words,
        }

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | Path | None = None) -> "FamilyGenSpec":
        doc = dict(doc)
        fmt = doc.pop("format", GEN_FORMAT)
        if fmt != GEN_FORMAT:
            raise ValueError(f"unsupported generator spec format {fmt!r}")
        tree = doc.pop("tree")
        if isinstance(tree, str):
            path = Path(tree)
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            if not path.exists():
                from ..phylogeny import data_path

                path = data_path(tree if tree.endswith(".json") else f"{tree}.json")
            tree = parse_tree(path.read_text(encoding="utf-8"))
        else:
            tree = parse_tree(tree)
        known = set(cls.__dataclass_fields__) - {"tree"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown generator spec fields: {sorted(extra)}")
        return cls(tree=tree, **doc)


def load_genspec(path: str | Path) -> FamilyGenSpec:
    path = Path(path)
    return FamilyGenSpec.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


# -- lexicon evolution ---------------------------------------------------------
def _proto_word(rng: np.random.Generator, syllables: int) -> list[str]:
    out: list[str] = []
    for _ in range(syllables):
        out.append(CONSONANTS[rng.integers(len(CONSONANTS))])
        out.append(VOWELS[rng.integers(len(VOWELS))])
        if rng.random() < 0.3:
            out.append(CONSONANTS[rng.integers(len(CONSONANTS))])
    return out


def _class_sizes(spec: FamilyGenSpec) -> dict[str, int]:
    sizes = dict(CLOSED_CLASS_SIZE)
    for tag, share in OPEN_CLASS_SHARE.items():
        sizes[tag] = max(1, int(round(share * spec.proto_lexicon_size)))
    return sizes


def proto_lexicon(spec: FamilyGenSpec, seed: int) -> dict[str, list[list[str]]]:
    rng = derive_rng(seed, "proto-lexicon")
    seen: set[str] = set()
    lex: dict[str, list[list[str]]] = {}
    for tag in TAGS:
        words = []
        closed = tag in CLOSED_CLASS_SIZE
        while len(words) < _class_sizes(spec)[tag]:
            w = _proto_word(rng, 1 if closed else int(rng.integers(2, 4)))
            key = "".join(w)
            if key not in seen:
                seen.add(key)
                words.append(w)
        lex[tag] = words
    return lex


def _edge_kind(tree: PhyloTree, child: str) -> str:
    kind = tree.nodes[child].kind
    return {FAMILY: "family", GENUS: "genus", LANGUAGE: "language", ROOT: "family"}[kind]


def _mutate(word: list[str], rate: float, rng: np.random.Generator) -> list[str]:
    out = list(word)
    hits = rng.random(len(out)) < rate
    for i in np.flatnonzero(hits):
        pool = VOWELS if out[i] in VOWELS else CONSONANTS
        choices = [p for p in pool if p != out[i]]
        out[i] = choices[rng.integers(len(choices))]
    return out


def evolve(spec: FamilyGenSpec, seed: int) -> tuple[dict[str, dict[str, list[str]]], dict[str, dict[str, bool]]]:
    """Per-language lexicons (tag -> word list aligned with the proto-lexicon) and word orders."""
    tree = spec.tree
    proto = proto_lexicon(spec, seed)
    rng0 = derive_rng(seed, "proto-order")
    order0 = {p: bool(rng0.random() < 0.5) for p in ORDER_PARAMS}
    order0["sv"] = True
    if spec.proto_order:
        order0.update(spec.proto_order)
    state: dict[str, tuple[dict[str, list[list[str]]], dict[str, bool]]] = {}
    for nid in tree.nodes:  # parents precede children in insertion order
        node = tree.nodes[nid]
        parent_lex, parent_order = (proto, order0) if node.parent is None else state[node.parent]
        if node.kind == ROOT:
            state[nid] = (parent_lex, dict(parent_order))
            continue
        kind = _edge_kind(tree, nid)
        rate = float(spec.edge_rates.get(nid, spec.rates.get(kind, 0.0)))
        repl = float(spec.replacement_rate.get(kind, 0.0))
        flip = float(spec.order_flip.get(kind, 0.0))
        rng = derive_rng(seed, "edge", nid)
        lex = {}
        for tag in TAGS:
            words = []
            for w in parent_lex[tag]:
                if repl > 0 and rng.random() < repl:
                    w = _proto_word(rng, max(1, len(w) // 2))
                words.append(_mutate(w, rate, rng) if rate > 0 else list(w))
            lex[tag] = words
        order = dict(parent_order)
        for p in ORDER_PARAMS:
            if p != "sv" and flip > 0 and rng.random() < flip:
                order[p] = not order[p]
        state[nid] = (lex, order)
    lexicons, orders = {}, {}
    for iso, leaf in tree.leaf_index.items():
        lex, order = state[leaf]
        lexicons[iso] = {tag: ["".join(w) for w in words] for tag, words in lex.items()}
        order = dict(order)
        order.update(spec.order_overrides.get(iso, {}))
        orders[iso] = order
    return lexicons, orders


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def lexicon_distance(a: Mapping[str, list[str]], b: Mapping[str, list[str]]) -> float:
    """Mean length-normalised edit distance between aligned lexicon entries."""
    total, n = 0.0, 0
    for tag in a:
        for wa, wb in zip(a[tag], b[tag]):
            total += edit_distance(wa, wb) / max(len(wa), len(wb))
            n += 1
    return total / n


# -- sentence grammar --------------------------------------------------------------
@lru_cache(maxsize=None)
def _zipf(n: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=float) ** -exponent
    return ranks / ranks.sum()


class _Clause:
    """Accumulates (word, tag, head-slot) triples; heads are resolved on flatten."""

    def __init__(self, lexicon, order, rng, zipf):
        self.lex = lexicon
        self.order = order
        self.rng = rng
        self.zipf = zipf
        self.items: list[list] = []

    def word(self, tag: str, lemma: int | None = None) -> int:
        words = self.lex[tag]
        if lemma is None:
            lemma = int(self.rng.choice(len(words), p=_zipf(len(words), self.zipf)))
        self.items.append([words[lemma], tag, None, lemma])
        return len(self.items) - 1

    def np_(self, max_adj: int = 2, allow_pp: bool = True) -> list[int]:
        rng, order = self.rng, self.order
        noun = self.word("NOUN")
        before, after = [], []
        if rng.random() < 0.6:
            d = self.word("DET")
            self.items[d][2] = noun
            (before if order["det_noun"] else after).append(d)
        n_adj = int(rng.random() < 0.35) + int(max_adj > 1 and rng.random() < 0.1)
        for _ in range(n_adj):
            a = self.word("ADJ")
            self.items[a][2] = noun
            (before if order["adj_noun"] else after).append(a)
        span = before + [noun] + after
        if allow_pp and rng.random() < 0.08:
            pp = self.pp(noun, allow_pp=False)
            span = span + pp
        return span

    def pp(self, attach: int, allow_pp: bool = True) -> list[int]:
        adp = self.word("ADP")
        inner = self.np_(max_adj=1, allow_pp=allow_pp)
        head = next(i for i in inner if self.items[i][1] == "NOUN" and self.items[i][2] is None)
        self.items[adp][2] = head
        self.items[head][2] = attach
        return [adp] + inner if self.order["prep"] else inner + [adp]

    def clause(self, force: dict | None = None) -> dict:
        rng, order = self.rng, self.order
        force = force or {}
        verb = self.word("VERB", force.get("verb"))
        self.items[verb][2] = -1
        if force.get("subj_pron", rng.random() < 0.2):
            subj = [self.word("PRON")]
            self.items[subj[0]][2] = verb
        else:
            subj = self.np_()
            self._attach(subj, verb)
        obj: list[int] = []
        if force.get("obj", rng.random() < 0.7):
            obj = self.np_()
            self._attach(obj, verb)
        neg = None
        if force.get("neg", rng.random() < 0.15):
            neg = self.word("PART")
            self.items[neg][2] = verb
        adv = None
        if force.get("adv", rng.random() < 0.25):
            adv = self.word("ADV")
            self.items[adv][2] = verb
        pp: list[int] = []
        if force.get("pp", rng.random() < 0.3):
            pp = self.pp(verb)
        vcore = [verb]
        if neg is not None:
            vcore = [neg, verb] if order["neg_pre"] else [verb, neg]
        if adv is not None and order["adv_pre"]:
            vcore = [adv] + vcore
        vp = vcore + obj if order["vo"] else obj + vcore
        vp = vp + pp if order["prep"] else pp + vp
        if adv is not None and not order["adv_pre"]:
            vp = vp + [adv]
        seq = subj + vp if order["sv"] else vp + subj
        return {"seq": seq, "verb": verb, "subj": subj, "obj": obj, "neg": neg, "adv": adv, "pp": pp}

    def _attach(self, span: list[int], head: int) -> None:
        for i in span:
            if self.items[i][1] in ("NOUN", "PRON") and self.items[i][2] is None:
                self.items[i][2] = head
                return

    def flatten(self, seq: list[int]) -> tuple[list[str], list[str], list[int]]:
        pos_of = {item: k + 1 for k, item in enumerate(seq)}
        words, tags, heads = [], [], []
        for item in seq:
            w, t, h, _ = self.items[item]
            words.append(w)
            tags.append(t)
            heads.append(0 if h == -1 else pos_of[h])
        return words, tags, heads


def _sentence(lexicon, order, rng, zipf, max_words):
    for _ in range(100):
        c = _Clause(lexicon, order, rng, zipf)
        info = c.clause()
        if len(info["seq"]) <= max_words:
            return c.flatten(info["seq"])
    raise RuntimeError("could not generate a sentence within max_words")


def _nli_pair(lexicon, order, rng, zipf, max_words):
    label = NLI_LABELS[int(rng.integers(3))]
    for _ in range(100):
        c = _Clause(lexicon, order, rng, zipf)
        info = c.clause(force={"adv": True} if rng.random() < 0.5 else None)
        premise, _, _ = c.flatten(info["seq"])
        if len(premise) > max_words:
            continue
        if label == "entailment":
            # drop optional modifiers: keep the skeleton
            keep = set(info["subj"] + info["obj"]) | {info["verb"]}
            if info["neg"] is not None:
                keep.add(info["neg"])
            drop = {i for i in keep if c.items[i][1] == "ADJ"}
            seq = [i for i in info["seq"] if i in keep and i not in drop]
            hyp = [c.items[i][0] for i in seq]
        elif label == "contradiction":
            seq = list(info["seq"])
            if info["neg"] is not None:
                seq.remove(info["neg"])
            else:
                c.items.append([lexicon["PART"][0], "PART", info["verb"], 0])
                neg = len(c.items) - 1
                k = seq.index(info["verb"])
                seq.insert(k if order["neg_pre"] else k + 1, neg)
            hyp = [c.items[i][0] for i in seq]
        else:
            c2 = _Clause(lexicon, order, rng, zipf)
            hyp = c2.flatten(c2.clause()["seq"])[0]
        if len(hyp) <= max_words:
            return {"premise": premise, "hypothesis": hyp, "label": label}
    raise RuntimeError("could not generate an NLI pair within max_words")


def generate_family(spec: FamilyGenSpec, seed: int, split: str = "train") -> dict[str, LanguageCorpus]:
    """Annotated corpora for every language of ``spec.tree``.

    Lexicons and word orders depend only on ``(spec, seed)``; ``split`` selects
    an independent stream of sentences (``train`` uses the per-language counts,
    any other split uses ``eval_sentences``).
    """
    lexicons, orders = evolve(spec, seed)
    out: dict[str, LanguageCorpus] = {}
    for iso in spec.tree.languages:
        rng = derive_rng(seed, "sentences", split, iso)
        sents, tags, heads = [], [], []
        for _ in range(spec.count(iso, split)):
            w, t, h = _sentence(lexicons[iso], orders[iso], rng, spec.zipf_exponent, spec.max_words)
            sents.append(w)
            tags.append(t)
            heads.append(h)
        nli = None
        if iso in spec.nli_languages:
            nrng = derive_rng(seed, "nli", split, iso)
            n = spec.nli_pairs if split == "train" else spec.eval_sentences
            nli = [_nli_pair(lexicons[iso], orders[iso], nrng, spec.zipf_exponent, spec.max_words) for _ in range(n)]
        out[iso] = LanguageCorpus(
            iso=iso,
            sentences=sents,
            pos=tags,
            heads=heads,
            nli=nli,
            provenance={"generator": GEN_FORMAT, "seed": int(seed), "split": split},
            lexicon=lexicons[iso],
            order=orders[iso],
        )
    return out
