"""Task heads (POS tagging, biaffine dependency arcs, NLI) and their metrics.

Tokens are whole words, so word ``k`` of a sentence sits at sequence position
``k`` (position 0 holds ``[CLS]``). Gold heads use the same indexing with 0 as
the artificial root, which lets arc scores be laid out as a square
``[seq, seq]`` matrix per sentence: row ``i`` is dependent position ``i`` and
column ``j`` is candidate head position ``j``, with column 0 carrying a learned
root vector in place of the ``[CLS]`` state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._rng import derive_rng
from .corpus.batching import IGNORE_INDEX
from .corpus.generate import NLI_LABELS, TAGS
from .corpus.vocab import CLS, PAD, SEP, Vocab
from .tensor import (
    MASK_VALUE,
    Tensor,
    add,
    concat,
    cross_entropy,
    gelu,
    linear,
    matmul,
    mul,
    reshape,
    swapaxes,
    take,
)

TASKS = ("pos", "dep", "nli")
TASK_METRIC = {"pos": "pos_f1_micro", "dep": "uas", "nli": "accuracy"}


def _normal(rng: np.random.Generator, *shape: int, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


class _Head:
    task = ""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.params.items()}

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class PosHead(_Head):
    task = "pos"

    @classmethod
    def create(cls, hidden_dim: int, num_tags: int = len(TAGS), seed: int = 0) -> "PosHead":
        rng = derive_rng(seed, "pos-head")
        return cls({"w": _normal(rng, hidden_dim, num_tags), "b": Tensor(np.zeros(num_tags))})

    @property
    def num_tags(self) -> int:
        return self.params["b"].shape[0]

    def logits(self, hidden: Tensor) -> Tensor:
        return linear(hidden, self.params["w"], self.params["b"])

    def loss(self, hidden: Tensor, tag_labels: np.ndarray) -> Tensor:
        flat = reshape(self.logits(hidden), (-1, self.num_tags))
        return cross_entropy(flat, tag_labels.reshape(-1), IGNORE_INDEX)


class BiaffineHead(_Head):
    task = "dep"

    @classmethod
    def create(cls, hidden_dim: int, arc_dim: int | None = None, seed: int = 0) -> "BiaffineHead":
        r = arc_dim or max(1, hidden_dim // 2)
        rng = derive_rng(seed, "biaffine-head")
        return cls(
            {
                "head_w": _normal(rng, hidden_dim, r, std=0.1),
                "head_b": Tensor(np.zeros(r)),
                "dep_w": _normal(rng, hidden_dim, r, std=0.1),
                "dep_b": Tensor(np.zeros(r)),
                "u": _normal(rng, r, r, std=0.1),
                "head_lin": _normal(rng, r, 1),
                "dep_lin": _normal(rng, r, 1),
                "bias": Tensor(np.zeros(1)),
                "root": _normal(rng, hidden_dim, std=1.0),
            }
        )

    def square_scores(self, hidden: Tensor) -> Tensor:
        """Unmasked arc scores ``[batch, seq, seq]``; column 0 uses the root vector."""
        n = hidden.shape[1]
        p = self.params
        first = np.zeros((n, 1))
        first[0] = 1.0
        # swap the [CLS] state in column 0 for the root vector
        cand = add(mul(hidden, Tensor(1.0 - first)), mul(p["root"], Tensor(first)))
        heads = gelu(linear(cand, p["head_w"], p["head_b"]))
        deps = gelu(linear(hidden, p["dep_w"], p["dep_b"]))
        bil = matmul(matmul(deps, p["u"]), swapaxes(heads, -1, -2))
        dep_term = matmul(deps, p["dep_lin"])
        head_term = swapaxes(matmul(heads, p["head_lin"]), -1, -2)
        return add(add(add(bil, dep_term), head_term), p["bias"])

    def masked_scores(self, hidden: Tensor, word_mask: np.ndarray) -> Tensor:
        return add(self.square_scores(hidden), Tensor(arc_mask(word_mask)))

    def loss(self, hidden: Tensor, word_mask: np.ndarray, head_labels: np.ndarray) -> Tensor:
        s = self.masked_scores(hidden, word_mask)
        b, n, _ = s.shape
        return cross_entropy(reshape(s, (b * n, n)), head_labels.reshape(-1), IGNORE_INDEX)


def arc_mask(word_mask: np.ndarray) -> np.ndarray:
    """Additive mask: candidate heads are the root and other words of the same sentence."""
    b, n = word_mask.shape
    cand = word_mask.copy()
    cand[:, 0] = True
    allowed = np.broadcast_to(cand[:, None, :], (b, n, n)).copy()
    idx = np.arange(n)
    allowed[:, idx, idx] = False
    return np.where(allowed, 0.0, MASK_VALUE)


class NliHead(_Head):
    task = "nli"

    @classmethod
    def create(cls, hidden_dim: int, num_labels: int = len(NLI_LABELS), seed: int = 0) -> "NliHead":
        rng = derive_rng(seed, "nli-head")
        return cls({"w": _normal(rng, hidden_dim, num_labels), "b": Tensor(np.zeros(num_labels))})

    def logits(self, hidden: Tensor) -> Tensor:
        b, n, h = hidden.shape
        cls_rows = take(reshape(hidden, (b * n, h)), np.arange(b) * n)
        return linear(cls_rows, self.params["w"], self.params["b"])

    def loss(self, hidden: Tensor, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.logits(hidden), labels, None)


class GoldReplayHead:
    """Debug head that returns the gold annotation; evaluation through it must score 1.0."""

    task = "oracle"

    def __init__(self, task: str):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task

    def parameters(self) -> list[Tensor]:
        return []

    def set_trainable(self, flag: bool) -> None:
        pass

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {}

    def param_count(self) -> int:
        return 0


def make_head(task: str, hidden_dim: int, seed: int = 0, arc_dim: int | None = None):
    if task == "pos":
        return PosHead.create(hidden_dim, seed=seed)
    if task == "dep":
        return BiaffineHead.create(hidden_dim, arc_dim, seed=seed)
    if task == "nli":
        return NliHead.create(hidden_dim, seed=seed)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# -- encoded task batches -------------------------------------------------------
@dataclass
class TaskBatch:
    ids: np.ndarray
    attention_mask: np.ndarray
    word_mask: np.ndarray
    iso: str
    tags: np.ndarray | None = None
    heads: np.ndarray | None = None
    labels: np.ndarray | None = None
    truncated: int = 0


def encode_tagged(vocab: Vocab, sentences, iso: str, pos=None, heads=None, max_len: int | None = None) -> TaskBatch:
    """Encode sentences with optional POS tags and gold heads aligned to token positions."""
    n_rows = len(sentences)
    width = max(len(s) for s in sentences) + 2
    if max_len is not None and width > max_len:
        raise ValueError(f"sentence of {width - 2} words does not fit max_seq_len {max_len}")
    ids = np.full((n_rows, width), PAD, dtype=np.int64)
    word_mask = np.zeros((n_rows, width), dtype=bool)
    tag_arr = np.full((n_rows, width), IGNORE_INDEX, dtype=np.int64) if pos is not None else None
    head_arr = np.full((n_rows, width), IGNORE_INDEX, dtype=np.int64) if heads is not None else None
    tag_index = {t: i for i, t in enumerate(TAGS)}
    for r, sent in enumerate(sentences):
        n = len(sent)
        ids[r, 0] = CLS
        ids[r, 1 : n + 1] = vocab.encode(sent)
        ids[r, n + 1] = SEP
        word_mask[r, 1 : n + 1] = True
        if tag_arr is not None:
            tag_arr[r, 1 : n + 1] = [tag_index[t] for t in pos[r]]
        if head_arr is not None:
            if any(not 0 <= hd <= n for hd in heads[r]):
                raise ValueError(f"row {r}: gold head outside [0, {n}]")
            head_arr[r, 1 : n + 1] = heads[r]
    return TaskBatch(ids, ids != PAD, word_mask, iso, tag_arr, head_arr)


def encode_pairs(vocab: Vocab, pairs: Sequence[dict], iso: str, max_len: int) -> TaskBatch:
    """``[CLS] premise [SEP] hypothesis [SEP]``; overlong pairs lose hypothesis tail tokens."""
    rows, truncated = [], 0
    for p in pairs:
        prem, hyp = vocab.encode(p["premise"]), vocab.encode(p["hypothesis"])
        room = max_len - 3 - len(prem)
        if room < 0:
            raise ValueError(f"premise of {len(prem)} tokens does not fit max_seq_len {max_len}")
        if len(hyp) > room:
            truncated += 1
            hyp = hyp[:room]
        rows.append([CLS] + prem + [SEP] + hyp + [SEP])
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    label_index = {label: i for i, label in enumerate(NLI_LABELS)}
    labels = np.array([label_index[p["label"]] for p in pairs], dtype=np.int64)
    return TaskBatch(ids, ids != PAD, np.zeros_like(ids, dtype=bool), iso, labels=labels, truncated=truncated)


# -- prediction -----------------------------------------------------------------
def pos_predict(hidden: Tensor, head: PosHead, word_mask: np.ndarray) -> list[list[int]]:
    """Tag id per word; ``argmax`` resolves ties to the lowest tag id."""
    logits = head.logits(hidden).data
    best = logits.argmax(axis=-1)
    return [best[r][word_mask[r]].tolist() for r in range(best.shape[0])]


def biaffine_scores(hidden: Tensor, head: BiaffineHead) -> np.ndarray:
    """Arc scores ``[n, n+1]`` for one sentence given its word states ``[n, h]``.

    The sentence is framed with a dummy leading row that the root vector replaces.
    """
    if hidden.ndim != 2:
        raise ValueError(f"expected word states [n, h], got {hidden.shape}")
    n, h = hidden.shape
    if n == 0:
        raise ValueError("cannot score an empty sentence")
    framed = concat([Tensor(np.zeros((1, h))), hidden], axis=0)
    sq = head.square_scores(reshape(framed, (1, n + 1, h))).data[0]
    return sq[1:, :]


def decode_arcs(scores: np.ndarray, mst: bool = False) -> list[int]:
    """Head per word from an ``[n, n+1]`` score matrix (column 0 is the root).

    The default greedy decoder takes each word's best column other than its own
    (lowest index on ties) and may produce cycles or several root children. With
    ``mst=True`` the result is the highest-scoring single-root tree.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n + 1):
        raise ValueError(f"scores must be [n, n+1], got {s.shape}")
    if mst:
        return _single_root_mst(s)
    s = s.copy()
    s[np.arange(n), np.arange(1, n + 1)] = -np.inf
    return s.argmax(axis=1).tolist()


def _cle(weights: np.ndarray) -> np.ndarray:
    """Chu-Liu/Edmonds maximum arborescence rooted at node 0.

    ``weights[d, h]`` scores head ``h`` for dependent ``d``; ``-inf`` forbids an arc.
    Returns ``heads`` with ``heads[0] = -1``.
    """
    n = weights.shape[0]
    w = weights.copy()
    np.fill_diagonal(w, -np.inf)
    w[0, :] = -np.inf
    heads = np.full(n, -1)
    heads[1:] = w[1:].argmax(axis=1)
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    outside = [v for v in range(n) if not in_cycle[v]]
    c = len(outside)  # index of the contracted node in the reduced graph
    m = c + 1
    reduced = np.full((m, m), -np.inf)
    cycle_score = {v: w[v, heads[v]] for v in cycle}
    enter_from: dict[int, int] = {}  # outside head -> cycle node it enters
    leave_to: dict[int, int] = {}  # outside dependent -> cycle node it hangs from
    for a, u in enumerate(outside):
        for b, v in enumerate(outside):
            reduced[a, b] = w[u, v]
        # arcs leaving the cycle: dependent u outside, head inside
        heads_in = [(w[u, v], v) for v in cycle]
        best, arg = max(heads_in, key=lambda t: (t[0], -t[1]))
        reduced[a, c] = best
        leave_to[u] = arg
        # arcs entering the cycle: head u outside, dependent inside
        gains = [(w[v, u] - cycle_score[v], v) for v in cycle]
        best, arg = max(gains, key=lambda t: (t[0], -t[1]))
        reduced[c, a] = best
        enter_from[u] = arg
    sub = _cle(reduced)
    out = heads.copy()
    for a, u in enumerate(outside):
        if u == 0:
            continue
        hd = sub[a]
        out[u] = leave_to[u] if hd == c else outside[hd]
    entering_head = outside[sub[c]]
    broken = enter_from[entering_head]
    out[broken] = entering_head
    return out


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    n = len(heads)
    color = np.zeros(n, dtype=int)
    for start in range(1, n):
        path, v = [], start
        while v > 0 and color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if v > 0 and color[v] == 1:
            return path[path.index(v) :]
        for u in path:
            color[u] = 2
    return None


def _single_root_mst(scores: np.ndarray) -> list[int]:
    n = scores.shape[0]
    full = np.full((n + 1, n + 1), -np.inf)
    full[1:, :] = scores
    best, best_heads = -np.inf, None
    for r in range(1, n + 1):
        w = full.copy()
        w[1:, 0] = -np.inf
        w[r, 0] = full[r, 0]
        heads = _cle(w)
        total = sum(w[d, heads[d]] for d in range(1, n + 1))
        if total > best:
            best, best_heads = total, heads
    return best_heads[1:].tolist()


def is_tree(heads: Sequence[int]) -> bool:
    """True when ``heads`` forms a single-root arborescence over words ``1..n``."""
    n = len(heads)
    h = np.concatenate([[-1], np.asarray(heads, dtype=int)])
    if any(not 0 <= x <= n for x in h[1:]) or sum(1 for x in h[1:] if x == 0) != 1:
        return False
    if any(h[i] == i for i in range(1, n + 1)):
        return False
    return _find_cycle(h) is None


def nli_predict(hidden: Tensor, head: NliHead) -> list[int]:
    return head.logits(hidden).data.argmax(axis=1).tolist()


# -- metrics ----------------------------------------------------------------------
def _flatten(xs) -> list:
    xs = list(xs)
    if xs and isinstance(xs[0], (list, tuple, np.ndarray)):
        return [y for x in xs for y in x]
    return xs


def _paired(pred, gold) -> tuple[list, list]:
    p, g = list(pred), list(gold)
    if len(p) != len(g):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} gold items")
    if p and isinstance(g[0], (list, tuple, np.ndarray)):
        for i, (a, b) in enumerate(zip(p, g)):
            if len(a) != len(b):
                raise ValueError(f"length mismatch in sentence {i}: {len(a)} vs {len(b)}")
    p, g = _flatten(p), _flatten(g)
    if not g:
        raise ValueError("cannot score an empty set")
    return p, g


def pos_f1(pred, gold, average: str = "micro") -> float:
    """Tagging F1; ``micro`` equals token accuracy, ``macro`` averages per-tag F1 over tags seen in either side."""
    p, g = _paired(pred, gold)
    if average == "micro":
        return sum(a == b for a, b in zip(p, g)) / len(g)
    if average != "macro":
        raise ValueError("average must be 'micro' or 'macro'")
    scores = []
    for tag in sorted(set(p) | set(g), key=str):
        tp = sum(a == tag and b == tag for a, b in zip(p, g))
        fp = sum(a == tag and b != tag for a, b in zip(p, g))
        fn = sum(a != tag and b == tag for a, b in zip(p, g))
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def uas(pred_heads, gold_heads) -> float:
    p, g = _paired(pred_heads, gold_heads)
    return sum(a == b for a, b in zip(p, g)) / len(g)


def nli_accuracy(pred, gold) -> float:
    p, g = _paired(pred, gold)
    return sum(a == b for a, b in zip(p, g)) / len(g)


def write_predictions(path: str | Path, rows: Iterable[dict]) -> int:
    """JSON-Lines ``{iso, sentence_index, pred, gold}`` export."""
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps({k: r[k] for k in ("iso", "sentence_index", "pred", "gold")}, sort_keys=True) + "\n")
            count += 1
    return count
