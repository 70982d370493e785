"""Tiny post-LN BERT encoder with an adapter injection point after every layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import checkpoint
from ._rng import derive_rng
from .adapters import AdapterChain, chain_forward
from .corpus.batching import IGNORE_INDEX, TokenBatch, apply_mlm_mask, batch_stream, encode_batch
from .corpus.generate import LanguageCorpus
from .corpus.vocab import Vocab
from .optim import Adam
from .tensor import (
    MASK_VALUE,
    Tensor,
    add,
    cross_entropy,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    swapaxes,
    take,
    transpose,
)


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 32
    dropout: float = 0.1
    gelu: str = "tanh"
    init_std: float = 0.02

    def __post_init__(self) -> None:
        dims = (self.vocab_size, self.hidden_dim, self.num_layers, self.num_heads, self.ffn_dim, self.max_seq_len)
        if min(dims) < 1:
            raise ValueError(f"all encoder dimensions must be >= 1: {self}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.gelu not in ("tanh", "none"):
            raise ValueError("gelu must be 'tanh' or 'none'")


@dataclass
class Backbone:
    config: EncoderConfig
    params: dict[str, Tensor]
    frozen: bool = True
    pretrain_languages: list[str] = field(default_factory=list)
    pretrain_steps: int = 0

    def __post_init__(self) -> None:
        self.set_frozen(self.frozen)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        for p in self.params.values():
            p.requires_grad = not frozen
            p.grad = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        return checkpoint.tensor_checksum(self.state())

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def init_backbone(config: EncoderConfig, seed: int) -> Backbone:
    rng = derive_rng(seed, "backbone")
    h, f, std = config.hidden_dim, config.ffn_dim, config.init_std

    def normal(*shape):
        return Tensor(rng.normal(0.0, std, size=shape))

    params: dict[str, Tensor] = {
        "tok_emb": normal(config.vocab_size, h),
        "pos_emb": normal(config.max_seq_len, h),
        "emb_ln_g": Tensor(np.ones(h)),
        "emb_ln_b": Tensor(np.zeros(h)),
    }
    for i in range(config.num_layers):
        p = f"layer{i}."
        for n in ("q", "k", "v", "o"):
            params[p + n + "_w"] = normal(h, h)
            params[p + n + "_b"] = Tensor(np.zeros(h))
        params[p + "ln1_g"], params[p + "ln1_b"] = Tensor(np.ones(h)), Tensor(np.zeros(h))
        params[p + "ffn1_w"], params[p + "ffn1_b"] = normal(h, f), Tensor(np.zeros(f))
        params[p + "ffn2_w"], params[p + "ffn2_b"] = normal(f, h), Tensor(np.zeros(h))
        params[p + "ln2_g"], params[p + "ln2_b"] = Tensor(np.ones(h)), Tensor(np.zeros(h))
    params["mlm_dense_w"] = normal(h, h)
    params["mlm_dense_b"] = Tensor(np.zeros(h))
    params["mlm_ln_g"] = Tensor(np.ones(h))
    params["mlm_ln_b"] = Tensor(np.zeros(h))
    params["mlm_bias"] = Tensor(np.zeros(config.vocab_size))
    return Backbone(config, params)


def check_ids(config: EncoderConfig, ids: np.ndarray) -> None:
    if ids.ndim != 2:
        raise InputError(f"token ids must be a [batch, seq] array, got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    bad = np.argwhere((ids < 0) | (ids >= config.vocab_size))
    if len(bad):
        r, c = bad[0]
        raise InputError(f"token id {ids[r, c]} at row {r}, position {c} is outside the vocabulary [0, {config.vocab_size})")


def _attention(x: Tensor, bb: Backbone, i: int, key_bias: np.ndarray, drop) -> Tensor:
    cfg = bb.config
    b, n, h = x.shape
    nh = cfg.num_heads
    dh = h // nh
    p = f"layer{i}."

    def heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))

    q = heads(linear(x, bb[p + "q_w"], bb[p + "q_b"]))
    k = heads(linear(x, bb[p + "k_w"], bb[p + "k_b"]))
    v = heads(linear(x, bb[p + "v_w"], bb[p + "v_b"]))
    scores = add(matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), Tensor(key_bias))
    attn = drop(softmax(scores, axis=-1))
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, n, h))
    return linear(ctx, bb[p + "o_w"], bb[p + "o_b"])


def encoder_forward(
    backbone: Backbone,
    batch: TokenBatch | np.ndarray,
    chain: AdapterChain | None = None,
    *,
    attention_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Hidden states ``[batch, seq, h]``; the adapter chain runs after each layer's FFN layer-norm."""
    if isinstance(batch, TokenBatch):
        ids, attention_mask = batch.ids, batch.attention_mask
    else:
        ids = np.asarray(batch)
    ids = np.asarray(ids, dtype=np.int64)
    cfg = backbone.config
    check_ids(cfg, ids)
    if attention_mask is None:
        attention_mask = np.ones(ids.shape, dtype=bool)
    attention_mask = np.asarray(attention_mask, dtype=bool)
    b, n = ids.shape
    act = cfg.gelu

    def drop(t: Tensor) -> Tensor:
        return dropout(t, cfg.dropout, rng, training)

    x = add(take(backbone["tok_emb"], ids), take(backbone["pos_emb"], np.arange(n)))
    x = drop(layer_norm(x, backbone["emb_ln_g"], backbone["emb_ln_b"]))
    key_bias = np.where(attention_mask, 0.0, MASK_VALUE)[:, None, None, :]
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        x = layer_norm(add(x, drop(_attention(x, backbone, i, key_bias, drop))), backbone[p + "ln1_g"], backbone[p + "ln1_b"])
        ff = linear(gelu(linear(x, backbone[p + "ffn1_w"], backbone[p + "ffn1_b"]), act), backbone[p + "ffn2_w"], backbone[p + "ffn2_b"])
        x = layer_norm(add(x, drop(ff)), backbone[p + "ln2_g"], backbone[p + "ln2_b"])
        x = chain_forward(x, chain, i)
    return x


def mlm_logits(backbone: Backbone, hidden: Tensor) -> Tensor:
    """Vocabulary logits for ``hidden`` rows ``[..., h]``; the decoder is tied to the token embeddings."""
    z = gelu(linear(hidden, backbone["mlm_dense_w"], backbone["mlm_dense_b"]), backbone.config.gelu)
    z = layer_norm(z, backbone["mlm_ln_g"], backbone["mlm_ln_b"])
    return add(matmul(z, transpose(backbone["tok_emb"])), backbone["mlm_bias"])


def mlm_loss(
    backbone: Backbone,
    batch: TokenBatch,
    chain: AdapterChain | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy over the masked positions of an already-masked batch."""
    if batch.labels is None:
        raise ValueError("batch has no MLM labels; call apply_mlm_mask first")
    hidden = encoder_forward(backbone, batch, chain, training=training, rng=rng)
    labels = batch.labels.reshape(-1)
    rows = np.flatnonzero(labels != IGNORE_INDEX)
    flat = reshape(hidden, (-1, hidden.shape[-1]))
    return cross_entropy(mlm_logits(backbone, take(flat, rows)), labels[rows], ignore_index=None)


def masked_batches(stream, mask_prob: float, rng: np.random.Generator, vocab_size: int):
    """Apply MLM masking to each batch of ``stream``; batches where nothing got selected are skipped."""
    for batch in stream:
        masked = apply_mlm_mask(batch, mask_prob, rng, vocab_size)
        if (masked.labels != IGNORE_INDEX).any():
            yield masked


def mlm_pretrain_backbone(
    config: EncoderConfig,
    corpora: Mapping[str, LanguageCorpus],
    vocab: Vocab,
    steps: int,
    seed: int,
    *,
    batch_size: int = 16,
    lr: float = 1e-3,
    mask_prob: float = 0.15,
    log_every: int = 0,
    history: list | None = None,
) -> Backbone:
    """Pretrain a fresh backbone with MLM on the pooled ``corpora`` and return it frozen."""
    if not corpora:
        raise ValueError("cannot pretrain a backbone on an empty language pool")
    if config.vocab_size != len(vocab):
        raise ValueError(f"config.vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    bb = init_backbone(config, seed)
    bb.pretrain_languages = sorted(corpora)
    bb.pretrain_steps = steps
    if steps == 0:
        return bb
    bb.set_frozen(False)
    opt = Adam(lr=lr)
    stream = batch_stream(corpora, None, batch_size, seed, vocab, config.max_seq_len)
    mask_rng = derive_rng(seed, "backbone-mask")
    drop_rng = derive_rng(seed, "backbone-dropout")
    params = bb.parameters()
    for step, batch in zip(range(steps), masked_batches(stream, mask_prob, mask_rng, len(vocab))):
        loss = mlm_loss(bb, batch, training=True, rng=drop_rng)
        loss.backward()
        opt.step(params)
        if history is not None:
            history.append((batch.iso, float(loss.data)))
    bb.set_frozen(True)
    return bb


def mlm_eval_loss(
    backbone: Backbone,
    corpus: LanguageCorpus,
    vocab: Vocab,
    chain: AdapterChain | None = None,
    *,
    seed: int = 0,
    batch_size: int = 32,
    mask_prob: float = 0.15,
    max_sentences: int | None = None,
) -> float:
    """Token-weighted mean MLM loss over a fixed masking of ``corpus`` (pseudo-perplexity is its exp)."""
    sents = corpus.sentences if max_sentences is None else corpus.sentences[:max_sentences]
    rng = derive_rng(seed, "mlm-eval", corpus.iso)
    total, count = 0.0, 0
    for start in range(0, len(sents), batch_size):
        batch = encode_batch(vocab, sents[start : start + batch_size], corpus.iso, backbone.config.max_seq_len)
        masked = apply_mlm_mask(batch, mask_prob, rng, len(vocab))
        k = int((masked.labels != IGNORE_INDEX).sum())
        if k == 0:
            continue
        total += float(mlm_loss(backbone, masked, chain).data) * k
        count += k
    if count == 0:
        raise ValueError(f"no maskable tokens in corpus {corpus.iso!r}")
    return total / count


def save_backbone(backbone: Backbone, path: str | Path) -> str:
    meta = {
        "config": asdict(backbone.config),
        "pretrain_languages": backbone.pretrain_languages,
        "pretrain_steps": backbone.pretrain_steps,
    }
    return checkpoint.save(path, "backbone", meta, backbone.state())


def load_backbone(path: str | Path) -> Backbone:
    kind, meta, tensors, _ = checkpoint.load(path)
    if kind != "backbone":
        raise checkpoint.CheckpointError(f"{path}: expected a backbone checkpoint, found {kind!r}")
    cfg = EncoderConfig(**meta["config"])
    bb = Backbone(cfg, {k: Tensor(v) for k, v in tensors.items()})
    bb.pretrain_languages = list(meta.get("pretrain_languages", []))
    bb.pretrain_steps = int(meta.get("pretrain_steps", 0))
    return bb

