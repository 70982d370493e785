import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phyloadapt.adapters import (
    AdapterBank,
    AdapterChain,
    AdapterSpec,
    ChainError,
    adapter_forward,
    chain_forward,
    constrained_bottleneck,
    layer_param_count,
    load_bank,
    new_adapter,
    param_count,
    save_bank,
)
from phyloadapt.tensor import Tensor, cross_entropy, finite_difference_check, reshape, tensor_sum


def counted(h, d, layers):
    """Independent recount: instantiate the adapter and add up array sizes."""
    a = new_adapter(AdapterSpec(h, d, layers), seed=0)
    return sum(arr.size for arr in a.state().values())


def trained_like(spec, seed):
    a = new_adapter(spec, seed)
    rng = np.random.default_rng(seed + 100)
    for blk in a.layers:
        for k in blk:
            blk[k].data = rng.normal(0, 0.3, size=blk[k].shape)
    return a


# -- parameter arithmetic ---------------------------------------------------------------
def test_paper_scale_counts():
    assert param_count(AdapterSpec(768, 48, 12)) == 885_312
    assert param_count([AdapterSpec(768, 48, 12)] * 3) == 2_655_936 == 3 * 885_312
    assert param_count([AdapterSpec(768, 16, 12)] * 3) == 885_312


def test_layer_formula():
    assert layer_param_count(768, 48) == 2 * 768 * 48 + 48
    assert counted(8, 3, 2) == 2 * layer_param_count(8, 3)


@given(st.integers(1, 64), st.integers(1, 16), st.integers(1, 6))
def test_three_at_third_equals_one_at_full(h, third, layers):
    d = 3 * third
    assert param_count([AdapterSpec(h, third, layers)] * 3) == param_count(AdapterSpec(h, d, layers))
    assert counted(h, third, layers) * 3 == counted(h, d, layers)


def test_param_count_of_chain_and_params_agree():
    members = [new_adapter(AdapterSpec(10, d, 3, f"n{d}"), 0) for d in (2, 4)]
    chain = AdapterChain(members)
    assert param_count(chain) == chain.param_count() == sum(m.param_count() for m in members)
    with pytest.raises(TypeError):
        param_count(3.5)


def test_constrained_bottleneck():
    assert constrained_bottleneck(48, 3) == 16
    assert constrained_bottleneck(48, 1) == 48
    with pytest.raises(ValueError, match="multiple of 3"):
        constrained_bottleneck(50, 3)
    with pytest.raises(ValueError):
        constrained_bottleneck(48, 0)


def test_spec_validation():
    with pytest.raises(ValueError):
        AdapterSpec(0, 4)
    with pytest.raises(ValueError):
        AdapterSpec(8, 4, activation="relu6")


# -- forward ------------------------------------------------------------------------
@given(st.integers(1, 5), st.integers(1, 12), st.integers(0, 10_000))
def test_fresh_adapter_is_exact_identity(d, h, seed):
    a = new_adapter(AdapterSpec(h, d, 2), seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(3, 4, h)))
    for layer in range(2):
        assert np.array_equal(a.forward(x, layer).data, x.data)


def test_identity_wiring_in_linear_mode():
    h = 4
    blk = {"down_w": Tensor(np.eye(h)), "down_b": Tensor(np.zeros(h)), "up_w": Tensor(np.eye(h))}
    x = Tensor(np.random.default_rng(0).normal(size=(2, h)))
    assert np.allclose(adapter_forward(x, blk, "identity").data, 2 * x.data)


def test_forward_dimension_mismatch():
    a = new_adapter(AdapterSpec(6, 2, 1), 0)
    with pytest.raises(ValueError, match="hidden size 6"):
        a.forward(Tensor(np.ones((2, 5))), 0)


def test_new_adapter_is_deterministic():
    a, b = new_adapter(AdapterSpec(8, 4, 2, "L:x"), 3), new_adapter(AdapterSpec(8, 4, 2, "L:x"), 3)
    c = new_adapter(AdapterSpec(8, 4, 2, "L:y"), 3)
    assert a.checksum() == b.checksum() != c.checksum()


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("activation", ["gelu", "gelu_exact"])
def test_adapter_gradient(seed, activation):
    spec = AdapterSpec(6, 4, 1, "x", activation)
    a = trained_like(spec, seed)
    a.set_trainable(True)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    targets = rng.integers(0, 6, size=5)
    assert finite_difference_check(lambda: cross_entropy(a.forward(x, 0), targets), a.parameters() + [x]) < 1e-4


def test_chain_with_zero_members_equals_prefix():
    h = 6
    f = trained_like(AdapterSpec(h, 3, 2, "F"), 1)
    g = new_adapter(AdapterSpec(h, 3, 2, "G"), 2)
    leaf = new_adapter(AdapterSpec(h, 3, 2, "L"), 3)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, h)))
    for layer in range(2):
        full = chain_forward(x, AdapterChain([f, g, leaf]), layer).data
        assert np.array_equal(full, chain_forward(x, AdapterChain([f]), layer).data)


def test_chain_order_matters_for_trained_members():
    h = 6
    f, g = trained_like(AdapterSpec(h, 3, 1, "F"), 1), trained_like(AdapterSpec(h, 3, 1, "G"), 2)
    x = Tensor(np.random.default_rng(0).normal(size=(4, h)))
    fwd = chain_forward(x, AdapterChain([f, g]), 0).data
    rev = chain_forward(x, AdapterChain([g, f]), 0).data
    assert np.max(np.abs(fwd - rev)) > 0


def test_chain_empty_and_none():
    x = Tensor(np.ones((2, 3)))
    assert chain_forward(x, None, 0) is x
    assert chain_forward(x, AdapterChain([]), 0) is x


def test_chain_rejects_mixed_layer_counts():
    with pytest.raises(ChainError):
        AdapterChain([new_adapter(AdapterSpec(4, 2, 1, "a"), 0), new_adapter(AdapterSpec(4, 2, 2, "b"), 0)])


# -- bank -------------------------------------------------------------------------------
def test_bank_chain_reports_missing_nodes():
    bank = AdapterBank(None)
    bank.add(AdapterSpec(4, 2, 1, "F:X"), 0)
    with pytest.raises(ChainError, match="G:Y, L:z"):
        bank.chain(["F:X", "G:Y", "L:z"])
    with pytest.raises(ValueError):
        bank.add(AdapterSpec(4, 2, 1, "F:X"), 0)


def test_bank_checkpoint_round_trip(tmp_path):
    bank = AdapterBank(None)
    for seed, node in enumerate(("F:X", "G:Y", "L:z")):
        bank.adapters[node] = trained_like(AdapterSpec(5, 3, 2, node), seed)
    bank.update_counts.update({"F:X": 4, "L:z": 2})
    digest = save_bank(bank, tmp_path / "bank.ckpt")
    back = load_bank(tmp_path / "bank.ckpt")
    assert back.checksums() == bank.checksums()
    assert back.update_counts == bank.update_counts
    assert back["G:Y"].spec == bank["G:Y"].spec
    assert save_bank(back, tmp_path / "again.ckpt") == digest


def test_copy_is_independent():
    a = trained_like(AdapterSpec(4, 2, 1, "L:a"), 0)
    b = a.copy("L:b")
    b.layers[0]["down_w"].data = b.layers[0]["down_w"].data + 1
    assert b.node_id == "L:b" and a.checksum() != b.checksum()


def test_reshape_through_adapter_keeps_gradients():
    a = trained_like(AdapterSpec(4, 2, 1, "x"), 0)
    a.set_trainable(True)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)))
    assert finite_difference_check(lambda: tensor_sum(reshape(a.forward(x, 0), (6, 4))), a.parameters()) < 1e-4
