"""scikit-learn style wrapper around the full pipeline.

``fit`` takes training corpora keyed by language, pretrains a backbone on the
seen languages, trains the language adapters the stack needs and a task
adapter on ``source``. ``predict`` and ``score`` then work on any language of
the tree, and ``transform`` returns mean-pooled sentence vectors.
"""

from __future__ import annotations

from statistics import mean

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_corpora, check_languages
from .corpus.batching import encode_batch
from .corpus.vocab import build_vocab
from .encoder import EncoderConfig, encoder_forward, mlm_pretrain_backbone
from .phylogeny import PhyloTree
from .tasks import TASKS
from .training import (
    StackConfig,
    TrainConfig,
    _gold,
    assemble_stack,
    evaluate,
    predict,
    pretrain_joint,
    train_task_adapter,
)
from .suite import PRIMARY_METRIC


class PhyloAdapterModel(TransformerMixin, BaseEstimator):
    """Backbone + adapter stack + task adapter, trained end to end by ``fit``.

    Parameters mirror the suite manifest: ``stack`` is a stack label such as
    ``"FGLT"`` or ``"FGLT:L=aaa"``; ``unseen`` languages stay out of backbone
    pretraining; ``held_out`` languages get no adapter text at all.
    """

    def __init__(
        self,
        tree: PhyloTree | None = None,
        stack: str = "FGLT",
        task: str = "pos",
        source: str | None = None,
        unseen=(),
        held_out=(),
        encoder: dict | None = None,
        backbone_steps: int = 1500,
        backbone_lr: float = 1e-3,
        vocab_min_freq: int = 2,
        adapter_steps: int = 1000,
        lr: float = 1e-4,
        task_lr: float = 1e-3,
        task_steps: int = 600,
        bottleneck: int = 24,
        batch_size: int = 16,
        seed: int = 0,
        mst: bool = False,
    ):
        self.tree = tree
        self.stack = stack
        self.task = task
        self.source = source
        self.unseen = unseen
        self.held_out = held_out
        self.encoder = encoder
        self.backbone_steps = backbone_steps
        self.backbone_lr = backbone_lr
        self.vocab_min_freq = vocab_min_freq
        self.adapter_steps = adapter_steps
        self.lr = lr
        self.task_lr = task_lr
        self.task_steps = task_steps
        self.bottleneck = bottleneck
        self.batch_size = batch_size
        self.seed = seed
        self.mst = mst

    def _validate_params(self) -> StackConfig:
        if not isinstance(self.tree, PhyloTree):
            raise TypeError("tree must be a PhyloTree")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        return StackConfig.parse(self.stack)

    def _train_config(self, stack: StackConfig) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            task_lr=self.task_lr,
            steps=self.adapter_steps,
            task_steps=self.task_steps,
            batch_size=self.batch_size,
            seed=self.seed,
            bottleneck=self.bottleneck,
            reduction=stack.reduction,
            high_resource=(self.source,),
        )

    def fit(self, X, y=None):
        """Train on ``X`` (iso -> LanguageCorpus); labels are read from the source corpus."""
        stack = self._validate_params()
        corpora = check_corpora(X)
        check_languages(corpora, self.tree)
        unseen = set(check_languages(self.unseen, self.tree, what="unseen language"))
        held = set(check_languages(self.held_out, self.tree, what="held-out language"))
        if self.source not in corpora:
            raise ValueError(f"source language {self.source!r} has no training corpus")
        pool = {k: v for k, v in corpora.items() if k not in unseen | held}
        if not pool:
            raise ValueError("no seen language left for backbone pretraining")
        self.vocab_ = build_vocab(pool, min_freq=self.vocab_min_freq)
        cfg = EncoderConfig(vocab_size=len(self.vocab_), **(self.encoder or {}))
        self.backbone_ = mlm_pretrain_backbone(cfg, pool, self.vocab_, self.backbone_steps, self.seed, lr=self.backbone_lr)
        tc = self._train_config(stack)
        self.bank_ = None
        if stack.regime is not None:
            text = {k: v for k, v in corpora.items() if k not in held}
            self.bank_ = pretrain_joint(self.tree, text, self.backbone_, self.vocab_, tc, stack.regime)
        self.task_adapter_ = train_task_adapter(
            self.bank_, self.tree, corpora[self.source], self.task, tc, stack, self.vocab_, self.backbone_
        )
        self.stack_ = stack
        self.n_features_out_ = cfg.hidden_dim
        return self

    def _chain(self, iso: str):
        return assemble_stack(self.stack_, iso, self.bank_, self.task_adapter_, self.tree)

    def predict(self, X):
        """Per-item predictions; a single corpus gives a list, a mapping gives ``{iso: list}``."""
        check_is_fitted(self, "task_adapter_")
        corpora = check_corpora(X)
        out = {
            iso: predict(self.backbone_, self._chain(iso), self.task_adapter_.head, self.task, c, self.vocab_, mst=self.mst)
            for iso, c in corpora.items()
        }
        return next(iter(out.values())) if len(out) == 1 and not isinstance(X, dict) else out

    def evaluate(self, X, seed: int | None = None):
        """Full EvalReport over the test corpora in ``X``."""
        check_is_fitted(self, "task_adapter_")
        corpora = check_corpora(X)
        seen = [iso for iso in corpora if iso not in set(self.unseen) | set(self.held_out)]
        return evaluate(
            self.backbone_,
            {iso: self._chain(iso) for iso in corpora},
            self.task_adapter_.head,
            self.task,
            corpora,
            self.vocab_,
            config=self.stack_.label,
            seen=seen,
            seed=self.seed if seed is None else seed,
            mst=self.mst,
        )

    def score(self, X, y=None) -> float:
        """Mean over languages of the task's headline metric."""
        report = self.evaluate(X)
        return mean(r["value"] for r in report.select(metric=PRIMARY_METRIC[self.task]))

    def transform(self, X) -> np.ndarray:
        """Mean-pooled final hidden states per sentence, stacked over languages in key order."""
        check_is_fitted(self, "task_adapter_")
        corpora = check_corpora(X)
        max_len = self.backbone_.config.max_seq_len
        rows = []
        for iso, corpus in corpora.items():
            chain = self._chain(iso)
            for start in range(0, len(corpus.sentences), 64):
                batch = encode_batch(self.vocab_, corpus.sentences[start : start + 64], iso, max_len)
                hidden = encoder_forward(self.backbone_, batch, chain).data
                mask = batch.attention_mask[..., None]
                rows.append((hidden * mask).sum(axis=1) / mask.sum(axis=1))
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.n_features_out_))

    def gold(self, corpus):
        return _gold(corpus, self.task)
