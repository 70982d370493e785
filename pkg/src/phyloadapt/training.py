"""Adapter pretraining, task-adapter training, stack assembly and evaluation.

Stack codes read left to right as the adapters applied after every encoder
layer, root first, with ``T`` the task adapter on top. Each code draws its
language adapters from one pretraining regime:

=======  ===============  =========================================
code     regime           language part of the chain
=======  ===============  =========================================
T        none             (nothing)
LT       ``L`` (flat)     L:target, trained on its own batches only
FGLT     ``FGL``          F, G, L:target trained jointly
FT       ``FGL``          F
FGT      ``FGL``          F, G
FLT      ``FL``           F, L:target trained jointly
LLLT     ``LLL``          three reduced copies of L:target
RFGLT    ``RFGL``         R, F, G, L:target trained jointly
=======  ===============  =========================================
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from statistics import mean
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._rng import derive_rng
from . import checkpoint
from .adapters import (
    AdapterBank,
    AdapterChain,
    AdapterParams,
    AdapterSpec,
    ChainError,
    constrained_bottleneck,
    new_adapter,
)
from .corpus.batching import batch_stream, upsample_factors
from .corpus.generate import NLI_LABELS, TAGS, LanguageCorpus
from .corpus.vocab import Vocab
from .encoder import Backbone, encoder_forward, masked_batches, mlm_loss
from .optim import Adam
from .phylogeny import PhyloTree, RoutingError, route
from .tasks import (
    BiaffineHead,
    GoldReplayHead,
    NliHead,
    PosHead,
    decode_arcs,
    encode_pairs,
    encode_tagged,
    make_head,
    nli_accuracy,
    pos_f1,
    uas,
)
from .tensor import Tensor

STACK_LEVELS = {
    "T": (),
    "LT": ("L",),
    "FGLT": ("F", "G", "L"),
    "FT": ("F",),
    "FGT": ("F", "G"),
    "FLT": ("F", "L"),
    "LLLT": ("L", "L", "L"),
    "RFGLT": ("R", "F", "G", "L"),
}
STACK_REGIME = {
    "T": None,
    "LT": "L",
    "FGLT": "FGL",
    "FT": "FGL",
    "FGT": "FGL",
    "FLT": "FL",
    "LLLT": "LLL",
    "RFGLT": "RFGL",
}
REGIMES = ("FGL", "RFGL", "FL", "L", "LLL")
DEEP_COPIES = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StackConfig:
    code: str
    language_override: str | None = None
    reduction: int = 1
    tree_kind: str = "phylo"

    def __post_init__(self) -> None:
        if self.code not in STACK_LEVELS:
            raise ConfigError(f"unknown stack code {self.code!r}; expected one of {sorted(STACK_LEVELS)}")
        if self.reduction < 1:
            raise ConfigError("reduction must be >= 1")
        if self.tree_kind not in ("phylo", "random"):
            raise ConfigError("tree_kind must be 'phylo' or 'random'")

    @property
    def include_root(self) -> bool:
        return self.code == "RFGLT"

    @property
    def regime(self) -> str | None:
        return STACK_REGIME[self.code]

    @property
    def label(self) -> str:
        parts = [self.code]
        if self.reduction != 1:
            parts.append(f"d/{self.reduction}")
        if self.tree_kind != "phylo":
            parts.append(self.tree_kind)
        if self.language_override:
            parts.append(f"L={self.language_override}")
        return ":".join(parts)

    @classmethod
    def parse(cls, text: str | dict) -> "StackConfig":
        """Accepts ``{"code": ...}`` dicts or labels such as ``"FGLT:d/3:random:L=est"``."""
        if isinstance(text, dict):
            return cls(**text)
        code, *rest = text.split(":")
        kw: dict = {}
        for part in rest:
            if part.startswith("d/"):
                kw["reduction"] = int(part[2:])
            elif part.startswith("L="):
                kw["language_override"] = part[2:]
            elif part in ("phylo", "random"):
                kw["tree_kind"] = part
            else:
                raise ConfigError(f"cannot parse stack option {part!r} in {text!r}")
        return cls(code, **kw)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    task_lr: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    steps: int = 1000
    task_steps: int = 400
    batch_size: int = 16
    mask_prob: float = 0.15
    seed: int = 0
    bottleneck: int = 48
    task_bottleneck: int | None = None
    reduction: int = 1
    upsample: bool = True
    high_resource: tuple[str, ...] = ()
    activation: str = "gelu"

    def __post_init__(self) -> None:
        self.high_resource = tuple(self.high_resource)
        positive = (self.lr, self.clip_norm, self.batch_size, self.bottleneck, self.reduction)
        if min(positive) <= 0 or self.steps < 0 or self.task_steps < 0:
            raise ConfigError(f"training hyperparameters must be positive: {self}")
        if not 0 < self.mask_prob < 1:
            raise ConfigError("mask_prob must lie in (0, 1)")
        constrained_bottleneck(self.bottleneck, self.reduction)

    def optimizer(self, task: bool = False) -> Adam:
        lr = self.task_lr if task and self.task_lr else self.lr
        return Adam(lr, self.beta1, self.beta2, self.eps, self.clip_norm)


# -- routing ----------------------------------------------------------------------
def regime_route(tree: PhyloTree, iso: str, regime: str) -> list[str]:
    """Adapter node ids a batch of ``iso`` passes through under ``regime``."""
    if regime == "FGL":
        return route(tree, iso)
    if regime == "RFGL":
        return route(tree, iso, include_root=True)
    path = route(tree, iso)
    if regime == "FL":
        return [path[0], path[-1]]
    if regime == "L":
        return [path[-1]]
    if regime == "LLL":
        return [f"{path[-1]}#{k}" for k in range(1, DEEP_COPIES + 1)]
    raise ConfigError(f"unknown routing regime {regime!r}; expected one of {REGIMES}")


def regime_bottleneck(config: TrainConfig, regime: str) -> int:
    k = DEEP_COPIES if regime == "LLL" else config.reduction
    return constrained_bottleneck(config.bottleneck, k)


# -- joint / flat language-adapter pretraining ---------------------------------------
def pretrain_joint(
    tree: PhyloTree,
    corpora: Mapping[str, LanguageCorpus],
    backbone: Backbone,
    vocab: Vocab,
    config: TrainConfig,
    routing: str = "FGL",
) -> AdapterBank:
    """MLM-train every adapter reachable from the corpus languages.

    Batches come from one shared upsampled stream; each batch trains only the
    adapters on its language's route. ``routing="L"`` gives the flat baseline
    where each language adapter sees its own language only.
    """
    missing = sorted(iso for iso in corpora if iso not in tree.languages)
    if missing:
        raise RoutingError(f"corpus languages not in the tree: {', '.join(missing)}")
    if not corpora:
        raise ConfigError("no corpora to pretrain on")
    cfg = backbone.config
    d = regime_bottleneck(config, routing)
    bank = AdapterBank(backbone)
    routes = {iso: regime_route(tree, iso, routing) for iso in sorted(corpora)}
    for iso, nodes in routes.items():
        for node in nodes:
            if node not in bank:
                bank.add(AdapterSpec(cfg.hidden_dim, d, cfg.num_layers, node, config.activation), config.seed)
    bank.set_trainable(True)
    backbone.set_frozen(True)
    before = backbone.checksum()

    factors = upsample_factors(corpora, config.high_resource) if config.upsample else None
    stream = batch_stream(corpora, factors, config.batch_size, config.seed, vocab, cfg.max_seq_len)
    batches = masked_batches(stream, config.mask_prob, derive_rng(config.seed, "adapter-mask"), len(vocab))
    drop_rng = derive_rng(config.seed, "adapter-dropout")
    opt = config.optimizer()
    losses: dict[str, list[float]] = {iso: [] for iso in routes}
    order: list[str] = []
    for _, batch in zip(range(config.steps), batches):
        chain = bank.chain(routes[batch.iso])
        loss = mlm_loss(backbone, batch, chain, training=True, rng=drop_rng)
        loss.backward()
        opt.step(chain.parameters())
        bank.update_counts.update(chain.node_ids)
        losses[batch.iso].append(float(loss.data))
        order.append(batch.iso)
    if backbone.checksum() != before:
        raise RuntimeError("backbone parameters changed during adapter training")
    bank.set_trainable(False)
    bank.history = {"routing": routing, "losses": losses, "batches": order, "factors": factors, "bottleneck": d}
    return bank


# -- task adapters ------------------------------------------------------------------
@dataclass
class TaskAdapter:
    task: str
    source_iso: str
    stack: StackConfig
    adapter: AdapterParams
    head: object
    losses: list[float] = field(default_factory=list)

    def parameters(self) -> list[Tensor]:
        return self.adapter.parameters() + self.head.parameters()

    def param_count(self) -> int:
        return self.adapter.param_count()


_HEADS = {"pos": PosHead, "dep": BiaffineHead, "nli": NliHead}


def save_task_adapter(ta: TaskAdapter, path) -> str:
    meta = {
        "task": ta.task,
        "source_iso": ta.source_iso,
        "stack": ta.stack.label,
        "adapter": asdict(ta.adapter.spec),
        "final_loss": ta.losses[-1] if ta.losses else None,
    }
    tensors = {**ta.adapter.state("adapter/"), **ta.head.state("head/")}
    return checkpoint.save(path, "task-adapter", meta, tensors)


def load_task_adapter(path) -> TaskAdapter:
    kind, meta, tensors, _ = checkpoint.load(path)
    if kind != "task-adapter":
        raise checkpoint.CheckpointError(f"{path}: expected a task-adapter checkpoint, found {kind!r}")
    spec = AdapterSpec(**meta["adapter"])
    layers = [{k: Tensor(tensors[f"adapter/{i}.{k}"]) for k in ("down_w", "down_b", "up_w")} for i in range(spec.num_layers)]
    head = _HEADS[meta["task"]]({k[5:]: Tensor(v) for k, v in tensors.items() if k.startswith("head/")})
    return TaskAdapter(meta["task"], meta["source_iso"], StackConfig.parse(meta["stack"]), AdapterParams(spec, layers), head)


def language_nodes(stack: StackConfig, iso: str, tree: PhyloTree) -> list[str]:
    """Language-adapter node ids of ``stack`` for ``iso`` (override applied to the L level)."""
    if stack.regime is None:
        return []
    path = route(tree, iso, include_root=stack.include_root)
    override = stack.language_override
    lang = f"L:{override}" if override else path[-1]
    by_level = {node.split(":", 1)[0]: node for node in path}
    by_level["L"] = lang
    if stack.code == "LLLT":
        return [f"{lang}#{k}" for k in range(1, DEEP_COPIES + 1)]
    return [by_level[level] for level in STACK_LEVELS[stack.code]]


def _task_rows(corpus: LanguageCorpus, task: str) -> int:
    if task in ("pos", "dep"):
        needed = corpus.pos if task == "pos" else corpus.heads
        if needed is None:
            raise ConfigError(f"language {corpus.iso!r} has no gold {task} annotations")
        return len(corpus.sentences)
    if task == "nli":
        if not corpus.nli:
            raise ConfigError(f"language {corpus.iso!r} has no NLI pairs")
        return len(corpus.nli)
    raise ConfigError(f"unknown task {task!r}")


def _encode_rows(corpus: LanguageCorpus, task: str, rows: Sequence[int], vocab: Vocab, max_len: int):
    if task == "nli":
        return encode_pairs(vocab, [corpus.nli[r] for r in rows], corpus.iso, max_len)
    sents = [corpus.sentences[r] for r in rows]
    pos = [corpus.pos[r] for r in rows] if task == "pos" else None
    heads = [corpus.heads[r] for r in rows] if task == "dep" else None
    return encode_tagged(vocab, sents, corpus.iso, pos, heads, max_len)


def _head_loss(head, task: str, hidden: Tensor, batch) -> Tensor:
    if task == "pos":
        return head.loss(hidden, batch.tags)
    if task == "dep":
        return head.loss(hidden, batch.word_mask, batch.heads)
    return head.loss(hidden, batch.labels)


def train_task_adapter(
    bank: AdapterBank | None,
    tree: PhyloTree,
    source: LanguageCorpus,
    task: str,
    config: TrainConfig,
    stack: StackConfig,
    vocab: Vocab,
    backbone: Backbone | None = None,
) -> TaskAdapter:
    """Train a task adapter and head on ``source`` on top of its frozen language chain."""
    backbone = backbone if backbone is not None else bank.backbone
    n_rows = _task_rows(source, task)
    cfg = backbone.config
    lang_nodes = language_nodes(StackConfig(stack.code, None, stack.reduction, stack.tree_kind), source.iso, tree)
    if lang_nodes and bank is None:
        raise ConfigError(f"stack {stack.code} needs a language-adapter bank")
    lang_chain = bank.chain(lang_nodes) if lang_nodes else AdapterChain([])
    for member in lang_chain:
        member.set_trainable(False)
    backbone.set_frozen(True)
    d = config.task_bottleneck or config.bottleneck
    task_seed = config.seed
    adapter = new_adapter(AdapterSpec(cfg.hidden_dim, d, cfg.num_layers, f"T:{task}", config.activation), task_seed)
    head = make_head(task, cfg.hidden_dim, seed=task_seed)
    ta = TaskAdapter(task, source.iso, stack, adapter, head)
    adapter.set_trainable(True)
    head.set_trainable(True)
    chain = AdapterChain(list(lang_chain) + [adapter])
    rng = derive_rng(config.seed, "task-batches", task, stack.code)
    drop_rng = derive_rng(config.seed, "task-dropout", task, stack.code)
    opt = config.optimizer(task=True)
    params = ta.parameters()
    for _ in range(config.task_steps):
        rows = rng.integers(0, n_rows, size=config.batch_size)
        batch = _encode_rows(source, task, rows, vocab, cfg.max_seq_len)
        hidden = encoder_forward(backbone, batch.ids, chain, attention_mask=batch.attention_mask, training=True, rng=drop_rng)
        loss = _head_loss(head, task, hidden, batch)
        loss.backward()
        opt.step(params)
        ta.losses.append(float(loss.data))
    adapter.set_trainable(False)
    head.set_trainable(False)
    return ta


def assemble_stack(
    stack: StackConfig,
    target_iso: str,
    bank: AdapterBank | None,
    task_adapter: TaskAdapter | None,
    tree: PhyloTree,
) -> AdapterChain:
    """Compile ``stack`` for ``target_iso`` into the per-layer adapter chain."""
    nodes = language_nodes(stack, target_iso, tree)
    members: list[AdapterParams] = []
    if nodes:
        if bank is None:
            raise ChainError(f"stack {stack.code} needs a language-adapter bank")
        missing = [n for n in nodes if n not in bank]
        if missing:
            hint = "" if stack.language_override else "; pass a language_override to substitute a related language"
            raise ChainError(f"cannot assemble {stack.code} for {target_iso}: missing adapter(s) {', '.join(missing)}{hint}")
        members = list(bank.chain(nodes))
    if task_adapter is not None:
        members.append(task_adapter.adapter)
    return AdapterChain(members)


# -- evaluation ---------------------------------------------------------------------
@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    COLUMNS = ("family", "iso", "seen", "config", "task", "metric", "value", "seed", "param_count")

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        for k, v in other.notes.items():
            self.notes.setdefault(k, v)

    def select(self, **where) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in where.items())]

    def average(self, config: str, task: str, metric: str, subset: str = "all", seed=None) -> float:
        """Mean over languages (and seeds unless ``seed`` is given); ``subset`` is all, seen or unseen."""
        rows = self.select(config=config, task=task, metric=metric)
        if seed is not None:
            rows = [r for r in rows if r["seed"] == seed]
        if subset != "all":
            want = subset == "seen"
            rows = [r for r in rows if r["seen"] == want]
        if not rows:
            raise KeyError(f"no rows for config={config} task={task} metric={metric} subset={subset}")
        return mean(r["value"] for r in rows)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "notes": self.notes}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc.get("notes", {}))


def _gold(corpus: LanguageCorpus, task: str):
    if task == "pos":
        return corpus.pos
    if task == "dep":
        return corpus.heads
    return [p["label"] for p in corpus.nli]


def predict(
    backbone: Backbone,
    chain: AdapterChain | None,
    head,
    task: str,
    corpus: LanguageCorpus,
    vocab: Vocab,
    *,
    batch_size: int = 64,
    mst: bool = False,
) -> list:
    """Predictions over every evaluation item of ``corpus`` (per-sentence lists for pos/dep)."""
    if isinstance(head, GoldReplayHead):
        gold = _gold(corpus, task)
        return [list(g) for g in gold] if task != "nli" else list(gold)
    n_rows = _task_rows(corpus, task)
    max_len = backbone.config.max_seq_len
    out: list = []
    for start in range(0, n_rows, batch_size):
        rows = range(start, min(n_rows, start + batch_size))
        batch = _encode_rows(corpus, task, rows, vocab, max_len)
        hidden = encoder_forward(backbone, batch.ids, chain, attention_mask=batch.attention_mask)
        if task == "nli":
            out.extend(NLI_LABELS[i] for i in head.logits(hidden).data.argmax(axis=1))
        elif task == "pos":
            best = head.logits(hidden).data.argmax(axis=-1)
            for r in range(best.shape[0]):
                out.append([TAGS[t] for t in best[r][batch.word_mask[r]]])
        else:
            scores = head.masked_scores(hidden, batch.word_mask).data
            for r in range(scores.shape[0]):
                n = int(batch.word_mask[r].sum())
                out.append(decode_arcs(scores[r, 1 : n + 1, : n + 1], mst=mst))
    return out


def evaluate(
    backbone: Backbone,
    chains: Mapping[str, AdapterChain | None],
    head,
    task: str,
    test_corpora: Mapping[str, LanguageCorpus],
    vocab: Vocab,
    *,
    config: str,
    seen: Iterable[str] = (),
    seed: int = 0,
    family: str = "",
    mst: bool = False,
) -> EvalReport:
    """Score one configuration on every test language; ``chains`` maps iso to its assembled chain."""
    seen = set(seen)
    report = EvalReport()
    for iso in sorted(test_corpora):
        corpus = test_corpora[iso]
        chain = chains[iso]
        pred = predict(backbone, chain, head, task, corpus, vocab, mst=mst)
        gold = _gold(corpus, task)
        if task == "pos":
            metrics = {"pos_f1_micro": pos_f1(pred, gold), "pos_f1_macro": pos_f1(pred, gold, "macro")}
        elif task == "dep":
            metrics = {"uas": uas(pred, gold)}
        else:
            metrics = {"accuracy": nli_accuracy(pred, gold)}
        pc = chain.param_count() if chain is not None else 0
        for metric, value in metrics.items():
            report.rows.append(
                {
                    "family": family,
                    "iso": iso,
                    "seen": iso in seen,
                    "config": config,
                    "task": task,
                    "metric": metric,
                    "value": float(value),
                    "seed": seed,
                    "param_count": pc,
                }
            )
    return report


def update_count_oracle(bank: AdapterBank, tree: PhyloTree) -> Counter:
    """Recount per-node updates from the recorded batch languages."""
    counts: Counter = Counter()
    for iso in bank.history.get("batches", []):
        counts.update(regime_route(tree, iso, bank.history["routing"]))
    return counts


def snapshot(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def unchanged(params: Iterable[Tensor], snap: Sequence[np.ndarray]) -> bool:
    return all(np.array_equal(p.data, s) for p, s in zip(params, snap))

