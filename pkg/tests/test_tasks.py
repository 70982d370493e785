import itertools
import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phyloadapt.corpus import NLI_LABELS, LanguageCorpus, build_vocab
from phyloadapt.tasks import (
    BiaffineHead,
    GoldReplayHead,
    NliHead,
    PosHead,
    _cle,
    arc_mask,
    biaffine_scores,
    decode_arcs,
    encode_pairs,
    encode_tagged,
    is_tree,
    make_head,
    nli_accuracy,
    nli_predict,
    pos_f1,
    pos_predict,
    uas,
    write_predictions,
)
from phyloadapt.tensor import Tensor, finite_difference_check


# -- metrics -----------------------------------------------------------------------------
def test_pos_f1_hand_case():
    gold, pred = ["A", "A", "B", "B"], ["A", "B", "B", "B"]
    assert pos_f1(pred, gold) == 0.75
    assert pos_f1(pred, gold, "macro") == pytest.approx((2 / 3 + 4 / 5) / 2)
    assert round(pos_f1(pred, gold, "macro"), 4) == 0.7333


def test_pos_f1_extremes_and_errors():
    assert pos_f1([[1, 2], [3]], [[1, 2], [3]]) == 1.0
    assert pos_f1([0, 0], [1, 1]) == 0.0
    with pytest.raises(ValueError, match="length mismatch"):
        pos_f1([1, 2], [1])
    with pytest.raises(ValueError, match="sentence 0"):
        pos_f1([[1, 2]], [[1]])
    with pytest.raises(ValueError):
        pos_f1([1], [1], "weighted")


def test_uas_examples():
    assert uas([2, 1], [0, 1]) == 0.5
    assert uas([[0, 1]], [[0, 1]]) == 1.0
    with pytest.raises(ValueError):
        uas([1], [1, 2])


@given(st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=5), min_size=1, max_size=5), st.data())
def test_metrics_in_unit_interval_and_one_iff_equal(gold, data):
    pred = [data.draw(st.lists(st.integers(0, 4), min_size=len(g), max_size=len(g))) for g in gold]
    for metric in (uas, pos_f1):
        score = metric(pred, gold)
        assert 0.0 <= score <= 1.0
        assert (score == 1.0) == (pred == gold)
    assert 0.0 <= pos_f1(pred, gold, "macro") <= 1.0


def test_nli_accuracy():
    assert nli_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert nli_accuracy([0, 0, 0], [0, 1, 2]) == pytest.approx(1 / 3)


# -- POS head ---------------------------------------------------------------------------
def test_single_tag_inventory_predicts_that_tag():
    head = PosHead.create(6, num_tags=1, seed=0)
    hidden = Tensor(np.random.default_rng(0).normal(size=(2, 5, 6)))
    mask = np.ones((2, 5), dtype=bool)
    assert pos_predict(hidden, head, mask) == [[0] * 5, [0] * 5]


def test_pos_argmax_ties_go_to_lowest_id():
    head = PosHead.create(3, num_tags=4)
    head.params["w"].data[:] = 0.0
    head.params["b"].data[:] = [0.0, 1.0, 1.0, 0.5]
    out = pos_predict(Tensor(np.ones((1, 2, 3))), head, np.array([[True, True]]))
    assert out == [[1, 1]]


def test_random_pos_head_is_at_chance():
    scores = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        gold = np.tile(np.arange(5), 200)
        rng.shuffle(gold)
        hidden = Tensor(rng.normal(size=(1, gold.size, 16)))
        head = PosHead.create(16, num_tags=5, seed=seed)
        pred = pos_predict(hidden, head, np.ones((1, gold.size), dtype=bool))[0]
        scores.append(pos_f1(pred, gold.tolist()))
    assert abs(np.mean(scores) - 0.2) < 0.05


def test_pos_loss_gradient():
    rng = np.random.default_rng(2)
    head = PosHead.create(5, num_tags=4, seed=1)
    head.set_trainable(True)
    hidden = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    tags = np.array([[-100, 1, 3], [2, 0, -100]])
    assert finite_difference_check(lambda: head.loss(hidden, tags), head.parameters() + [hidden]) < 1e-4


# -- biaffine head --------------------------------------------------------------------------
def test_biaffine_constant_when_bilinear_and_linear_terms_vanish():
    head = BiaffineHead.create(6, seed=0)
    for k in ("u", "head_lin", "dep_lin"):
        head.params[k].data[:] = 0.0
    head.params["bias"].data[:] = 3.0
    s = biaffine_scores(Tensor(np.random.default_rng(0).normal(size=(4, 6))), head)
    assert s.shape == (4, 5) and np.allclose(s, 3.0)


def test_biaffine_rejects_empty_and_misshaped():
    head = BiaffineHead.create(4)
    with pytest.raises(ValueError, match="empty"):
        biaffine_scores(Tensor(np.zeros((0, 4))), head)
    with pytest.raises(ValueError):
        biaffine_scores(Tensor(np.zeros((1, 2, 4))), head)


@pytest.mark.parametrize("seed", range(20))
def test_biaffine_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    head = BiaffineHead.create(6, arc_dim=4, seed=seed)
    head.set_trainable(True)
    hidden = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
    word_mask = np.array([[0, 1, 1, 1, 0], [0, 1, 1, 0, 0]], dtype=bool)
    heads = np.full((2, 5), -100)
    heads[0, 1:4] = [2, 0, 2]
    heads[1, 1:3] = [0, 1]
    assert finite_difference_check(lambda: head.loss(hidden, word_mask, heads), head.parameters() + [hidden]) < 1e-4


def test_biaffine_is_permutation_equivariant():
    rng = np.random.default_rng(4)
    head = BiaffineHead.create(8, seed=3)
    hidden = rng.normal(size=(5, 8))
    perm = np.array([2, 4, 0, 1, 3])
    s = biaffine_scores(Tensor(hidden), head)
    sp = biaffine_scores(Tensor(hidden[perm]), head)
    cols = np.concatenate([[0], perm + 1])
    assert np.allclose(sp, s[perm][:, cols], atol=1e-12)


def test_arc_mask_forbids_self_padding_and_other_sentences():
    m = arc_mask(np.array([[0, 1, 1, 0]], dtype=bool))[0]
    allowed = m == 0
    assert allowed[1].tolist() == [True, False, True, False]
    assert allowed[2].tolist() == [True, True, False, False]


# -- decoding -----------------------------------------------------------------------------
def argmax_oracle(s):
    out = []
    for i, row in enumerate(s):
        cands = [j for j in range(len(row)) if j != i + 1]
        best = max(row[j] for j in cands)
        out.append(min(j for j in cands if row[j] == best))
    return out


def test_single_word_attaches_to_root():
    assert decode_arcs(np.array([[-5.0, 100.0]])) == [0]
    assert decode_arcs(np.array([[-5.0, 100.0]]), mst=True) == [0]


def test_greedy_never_self_attaches():
    s = np.eye(4, 5, k=1) * 1000.0
    heads = decode_arcs(s)
    assert all(h != i + 1 for i, h in enumerate(heads))


@pytest.mark.parametrize("n", [1, 2])
def test_greedy_matches_exhaustive_oracle_on_every_small_matrix(n):
    for entries in itertools.product((0, 1, 2), repeat=n * (n + 1)):
        s = np.array(entries, dtype=float).reshape(n, n + 1)
        assert decode_arcs(s) == argmax_oracle(s)


@pytest.mark.parametrize("n", [3, 4])
def test_greedy_matches_oracle_on_every_row_at_every_position(n):
    # greedy decoding is row-separable, so sweeping each row exhaustively covers all matrices
    rng = np.random.default_rng(n)
    for i in range(n):
        for row in itertools.product((0, 1, 2), repeat=n + 1):
            s = rng.integers(0, 3, size=(n, n + 1)).astype(float)
            s[i] = row
            assert decode_arcs(s) == argmax_oracle(s)


@given(st.integers(3, 4).flatmap(lambda n: arrays(np.int64, (n, n + 1), elements=st.integers(0, 2))))
def test_greedy_matches_exhaustive_oracle_sampled(s):
    assert decode_arcs(s.astype(float)) == argmax_oracle(s)


def all_trees(n):
    for heads in itertools.product(range(n + 1), repeat=n):
        if is_tree(list(heads)):
            yield list(heads)


def tree_score(s, heads):
    return sum(s[i, h] for i, h in enumerate(heads))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_mst_is_the_best_single_root_tree(n):
    rng = np.random.default_rng(n)
    trees = list(all_trees(n))
    for _ in range(60):
        s = rng.integers(0, 3, size=(n, n + 1)).astype(float) + rng.normal(0, 1e-3, size=(n, n + 1))
        heads = decode_arcs(s, mst=True)
        assert is_tree(heads)
        assert tree_score(s, heads) == pytest.approx(max(tree_score(s, t) for t in trees), abs=1e-12)


def test_mst_on_integer_ties_is_still_a_best_tree():
    for n in (2, 3):
        trees = list(all_trees(n))
        for entries in itertools.islice(itertools.product((0, 1, 2), repeat=n * (n + 1)), 0, None, 7):
            s = np.array(entries, dtype=float).reshape(n, n + 1)
            heads = decode_arcs(s, mst=True)
            assert is_tree(heads) and tree_score(s, heads) == max(tree_score(s, t) for t in trees)


@pytest.mark.parametrize("seed", range(10))
def test_arborescence_matches_networkx(seed):
    rng = np.random.default_rng(seed)
    n = 7
    w = rng.normal(size=(n, n))
    heads = _cle(w)
    g = nx.DiGraph()
    for d in range(1, n):
        for h in range(n):
            if h != d:
                g.add_edge(h, d, weight=w[d, h])
    ref = nx.maximum_spanning_arborescence(g)
    ref_score = sum(d["weight"] for _, _, d in ref.edges(data=True))
    assert sum(w[d, heads[d]] for d in range(1, n)) == pytest.approx(ref_score, abs=1e-12)


def test_random_heads_score_at_chance():
    rng = np.random.default_rng(0)
    n = 5
    gold = [[2, 0, 2, 3, 3]] * 1000
    pred = [decode_arcs(rng.normal(size=(n, n + 1))) for _ in range(1000)]
    assert abs(uas(pred, gold) - 1 / n) < 0.03


def test_is_tree():
    assert is_tree([0]) and is_tree([2, 0, 2])
    assert not is_tree([0, 0]) and not is_tree([2, 1]) and not is_tree([1]) and not is_tree([5])


def test_decode_checks_shape():
    with pytest.raises(ValueError):
        decode_arcs(np.zeros((3, 3)))


# -- NLI -----------------------------------------------------------------------------------------
def test_untrained_nli_head_is_at_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        gold = np.tile(np.arange(3), 100)
        hidden = Tensor(rng.normal(size=(gold.size, 3, 16)))
        accs.append(nli_accuracy(nli_predict(hidden, NliHead.create(16, seed=seed)), gold.tolist()))
    assert abs(np.mean(accs) - 1 / 3) < 0.05


def test_permuting_nli_label_columns_permutes_predictions():
    head = NliHead.create(8, seed=1)
    head.params["w"].data = np.random.default_rng(1).normal(size=(8, 3))
    hidden = Tensor(np.random.default_rng(2).normal(size=(40, 2, 8)))
    perm = [2, 0, 1]
    swapped = NliHead({"w": Tensor(head.params["w"].data[:, perm]), "b": Tensor(head.params["b"].data[perm])})
    before, after = nli_predict(hidden, head), nli_predict(hidden, swapped)
    assert [perm[a] for a in after] == before


def test_nli_gradient():
    head = NliHead.create(5, seed=0)
    head.set_trainable(True)
    hidden = Tensor(np.random.default_rng(0).normal(size=(4, 3, 5)), requires_grad=True)
    assert finite_difference_check(lambda: head.loss(hidden, np.array([0, 2, 1, 1])), head.parameters() + [hidden]) < 1e-4


def test_encode_pairs_truncates_the_hypothesis_tail():
    vocab = build_vocab([LanguageCorpus("x", [["a", "b", "c", "d"]])])
    pairs = [
        {"premise": ["a", "b"], "hypothesis": ["c", "d", "a", "b"], "label": "neutral"},
        {"premise": ["a"], "hypothesis": ["b"], "label": "entailment"},
    ]
    batch = encode_pairs(vocab, pairs, "x", max_len=7)
    assert batch.truncated == 1 and batch.ids.shape == (2, 7)
    assert batch.labels.tolist() == [NLI_LABELS.index("neutral"), NLI_LABELS.index("entailment")]
    with pytest.raises(ValueError, match="premise"):
        encode_pairs(vocab, [{"premise": ["a"] * 6, "hypothesis": [], "label": "neutral"}], "x", 7)


# -- encoding and plumbing -------------------------------------------------------------------------
def test_encode_tagged_aligns_words_with_positions(toy_corpora, toy_vocab):
    c = toy_corpora["aab"]
    b = encode_tagged(toy_vocab, c.sentences[:3], "aab", c.pos[:3], c.heads[:3])
    for r in range(3):
        n = len(c.sentences[r])
        assert b.word_mask[r].sum() == n and b.heads[r, 1 : n + 1].tolist() == c.heads[r]
        assert (b.tags[r, ~b.word_mask[r]] == -100).all()
    with pytest.raises(ValueError, match="gold head"):
        encode_tagged(toy_vocab, [["x"]], "aab", heads=[[2]])
    with pytest.raises(ValueError, match="max_seq_len"):
        encode_tagged(toy_vocab, [["x"] * 10], "aab", max_len=5)


def test_make_head_and_gold_replay():
    assert isinstance(make_head("pos", 8), PosHead)
    assert isinstance(make_head("dep", 8), BiaffineHead)
    assert isinstance(make_head("nli", 8), NliHead)
    with pytest.raises(ValueError):
        make_head("ner", 8)
    g = GoldReplayHead("dep")
    assert g.param_count() == 0 and g.parameters() == []
    with pytest.raises(ValueError):
        GoldReplayHead("ner")


def test_write_predictions(tmp_path):
    rows = [{"iso": "aaa", "sentence_index": 0, "pred": [1], "gold": [1], "extra": 9}]
    assert write_predictions(tmp_path / "p.jsonl", rows) == 1
    assert json.loads((tmp_path / "p.jsonl").read_text()) == {"iso": "aaa", "sentence_index": 0, "pred": [1], "gold": [1]}
