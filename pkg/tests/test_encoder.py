import numpy as np
import pytest
from conftest import tiny_config

from phyloadapt import checkpoint
from phyloadapt.adapters import AdapterChain, AdapterSpec, new_adapter
from phyloadapt.checkpoint import CheckpointError
from phyloadapt.corpus import TokenBatch, apply_mlm_mask, build_vocab, encode_batch, generate_family
from phyloadapt.encoder import (
    EncoderConfig,
    InputError,
    encoder_forward,
    init_backbone,
    load_backbone,
    mlm_eval_loss,
    mlm_loss,
    mlm_pretrain_backbone,
    save_backbone,
)
from phyloadapt.tensor import Tensor, finite_difference_check


def random_ids(rng, vocab_size, shape):
    ids = rng.integers(5, vocab_size, size=shape)
    ids[:, 0] = 3
    return ids


def trained_adapter(h, layers, seed):
    a = new_adapter(AdapterSpec(h, 4, layers, f"L:{seed}"), seed)
    r = np.random.default_rng(seed)
    for blk in a.layers:
        blk["up_w"].data = r.normal(0, 0.2, size=blk["up_w"].shape)
    return a


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(vocab_size=10, hidden_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=0)
    with pytest.raises(ValueError):
        EncoderConfig(vocab_size=10, dropout=1.0)


def test_init_is_deterministic_per_seed():
    cfg = EncoderConfig(vocab_size=30, hidden_dim=8, num_heads=2, ffn_dim=16)
    assert init_backbone(cfg, 1).checksum() == init_backbone(cfg, 1).checksum()
    assert init_backbone(cfg, 1).checksum() != init_backbone(cfg, 2).checksum()


def test_fresh_backbone_is_frozen(tiny_backbone):
    assert tiny_backbone.frozen and not any(p.requires_grad for p in tiny_backbone.parameters())


def test_zero_up_adapter_is_a_passthrough(tiny_backbone, rng):
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (3, 7))
    plain = encoder_forward(tiny_backbone, ids).data
    chain = AdapterChain([new_adapter(AdapterSpec(16, 4, 2, "L:x"), 5)])
    assert np.max(np.abs(encoder_forward(tiny_backbone, ids, chain).data - plain)) == 0.0
    assert np.array_equal(encoder_forward(tiny_backbone, ids, AdapterChain([])).data, plain)


def test_trained_adapter_changes_output(tiny_backbone, rng):
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (2, 6))
    chain = AdapterChain([trained_adapter(16, 2, 0)])
    assert np.max(np.abs(encoder_forward(tiny_backbone, ids, chain).data - encoder_forward(tiny_backbone, ids).data)) > 0


def test_permuting_rows_permutes_outputs(tiny_backbone, rng):
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (5, 9))
    mask = np.ones(ids.shape, dtype=bool)
    mask[2, 6:] = False
    perm = np.array([3, 0, 4, 2, 1])
    chain = AdapterChain([trained_adapter(16, 2, 1)])
    out = encoder_forward(tiny_backbone, ids, chain, attention_mask=mask).data
    out_p = encoder_forward(tiny_backbone, ids[perm], chain, attention_mask=mask[perm]).data
    assert np.allclose(out[perm], out_p, atol=1e-12)


def test_padding_values_never_leak(tiny_backbone, rng):
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (3, 10))
    mask = np.ones(ids.shape, dtype=bool)
    mask[0, 4:] = False
    mask[2, 7:] = False
    other = ids.copy()
    other[~mask] = rng.integers(0, tiny_backbone.config.vocab_size, size=int((~mask).sum()))
    a = encoder_forward(tiny_backbone, ids, attention_mask=mask).data
    b = encoder_forward(tiny_backbone, other, attention_mask=mask).data
    assert np.max(np.abs(a[mask] - b[mask])) < 1e-12


def test_bad_token_id_reports_position(tiny_backbone):
    ids = np.full((2, 4), 5)
    ids[1, 3] = tiny_backbone.config.vocab_size
    with pytest.raises(InputError, match="row 1, position 3"):
        encoder_forward(tiny_backbone, ids)
    with pytest.raises(InputError, match="max_seq_len"):
        encoder_forward(tiny_backbone, np.full((1, 49), 5))


def test_eval_forward_is_deterministic_and_training_uses_dropout(tiny_backbone, rng):
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (2, 5))
    a = encoder_forward(tiny_backbone, ids).data
    assert np.array_equal(a, encoder_forward(tiny_backbone, ids).data)
    t = encoder_forward(tiny_backbone, ids, training=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, t)


def test_full_encoder_gradient_matches_finite_differences():
    cfg = EncoderConfig(vocab_size=12, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=8, max_seq_len=6, init_std=0.4)
    bb = init_backbone(cfg, 3)
    bb.set_frozen(False)
    chain = AdapterChain([trained_adapter(8, 2, 2)])
    chain.members[0].set_trainable(True)
    r = np.random.default_rng(0)
    ids = random_ids(r, 12, (2, 6))
    ids[:, -1] = 4
    mask = np.ones(ids.shape, dtype=bool)
    mask[1, 4:] = False
    labels = np.full(ids.shape, -100)
    labels[0, 2], labels[1, 1], labels[0, 4] = 7, 9, 5
    batch = TokenBatch(ids, mask, "xx", labels)
    params = bb.parameters() + chain.members[0].parameters()
    assert finite_difference_check(lambda: mlm_loss(bb, batch, chain), params, step=1e-5) < 1e-3


def test_zero_steps_returns_the_initialisation(toy_corpora, toy_vocab):
    cfg = tiny_config(len(toy_vocab))
    bb = mlm_pretrain_backbone(cfg, toy_corpora, toy_vocab, 0, seed=4)
    assert bb.checksum() == init_backbone(cfg, 4).checksum()
    assert bb.pretrain_languages == sorted(toy_corpora)


def test_pretraining_errors(toy_corpora, toy_vocab):
    with pytest.raises(ValueError, match="empty"):
        mlm_pretrain_backbone(tiny_config(len(toy_vocab)), {}, toy_vocab, 5, 0)
    with pytest.raises(ValueError, match="vocab_size"):
        mlm_pretrain_backbone(tiny_config(len(toy_vocab) + 1), toy_corpora, toy_vocab, 5, 0)


def test_mlm_loss_needs_labels(tiny_backbone, toy_vocab, toy_corpora):
    batch = encode_batch(toy_vocab, toy_corpora["aaa"].sentences[:2], "aaa")
    with pytest.raises(ValueError, match="apply_mlm_mask"):
        mlm_loss(tiny_backbone, batch)


def test_mlm_loss_decreases_over_500_steps(toy_corpora, toy_vocab):
    history = []
    bb = mlm_pretrain_backbone(tiny_config(len(toy_vocab)), toy_corpora, toy_vocab, 500, seed=0, history=history)
    losses = np.array([loss for _, loss in history])
    assert len(losses) == 500
    assert losses[-50:].mean() < losses[:50].mean()
    assert bb.frozen


def test_excluded_languages_score_worse_than_included(toy_spec):
    gaps = []
    for seed in range(3):
        train = generate_family(toy_spec, seed)
        test = generate_family(toy_spec, seed, "test")
        vocab = build_vocab(train)
        seen = {k: v for k, v in train.items() if k not in ("aac", "bbb")}
        bb = mlm_pretrain_backbone(tiny_config(len(vocab)), seen, vocab, 400, seed)
        inc = np.mean([mlm_eval_loss(bb, test[k], vocab) for k in seen])
        exc = np.mean([mlm_eval_loss(bb, test[k], vocab) for k in ("aac", "bbb")])
        gaps.append(exc - inc)
    assert np.mean(gaps) > 0


def test_checkpoint_round_trip(tmp_path, tiny_backbone, rng):
    tiny_backbone.pretrain_languages = ["aaa", "bba"]
    digest = save_backbone(tiny_backbone, tmp_path / "bb.ckpt")
    back = load_backbone(tmp_path / "bb.ckpt")
    assert back.checksum() == tiny_backbone.checksum() and back.config == tiny_backbone.config
    assert back.pretrain_languages == ["aaa", "bba"] and back.frozen
    assert save_backbone(back, tmp_path / "again.ckpt") == digest
    ids = random_ids(rng, tiny_backbone.config.vocab_size, (2, 5))
    assert np.array_equal(encoder_forward(back, ids).data, encoder_forward(tiny_backbone, ids).data)


def test_loading_another_kind_is_refused(tmp_path):
    checkpoint.save(tmp_path / "x.ckpt", "adapter-bank", {}, {"a": np.zeros(2)})
    with pytest.raises(CheckpointError, match="backbone"):
        load_backbone(tmp_path / "x.ckpt")


def test_mlm_masking_keeps_batch_shape(tiny_backbone, toy_vocab, toy_corpora):
    batch = encode_batch(toy_vocab, toy_corpora["aaa"].sentences[:4], "aaa", 48)
    masked = apply_mlm_mask(batch, 0.5, 0, len(toy_vocab))
    loss = mlm_loss(tiny_backbone, masked)
    assert isinstance(loss, Tensor) and loss.shape == () and np.isfinite(loss.item())
