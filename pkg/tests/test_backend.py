import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cott.backend import (
    BackboneConfig,
    SlotDistribution,
    Vocabulary,
    parameter_count,
    reference_backbone,
    restricted_softmax,
)
from cott.errors import EmptyCandidateSet, SequenceTooLong
from cott.prompt import PromptInstance, compile_template, render_step1

from conftest import central_difference, relative_error

VOCAB = ["the", "domain", "is", "area", ",", ".", "a", "b", "c", "d", "e", "<label:x>", "<label:y>", "<label:z>"]


def make(seed=0, **kw):
    cfg = BackboneConfig(**{"hidden_size": 32, "num_layers": 2, "num_heads": 4, "max_length": 24, **kw})
    return reference_backbone(cfg, VOCAB, seed=seed)


def prompt(tokens):
    return PromptInstance(tuple(tokens), 0, (), ())


def test_seeded_init_is_bitwise_identical():
    a, b = make(0), make(0)
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)
    c = make(1)
    assert not torch.equal(a.encoder.tok.weight, c.encoder.tok.weight)


def brute_force_count(vocab_size, d, layers, ffn, max_len):
    # written out layer by layer, independent of parameter_count()
    total = vocab_size * d + max_len * d
    for _ in range(layers):
        total += d * 3 * d + 3 * d  # fused qkv
        total += d * d + d  # output projection
        total += d * ffn + ffn + ffn * d + d
        total += 4 * d  # two layer norms
    return total + 2 * d


@pytest.mark.parametrize("d,layers,heads", [(32, 2, 4), (16, 1, 2), (64, 3, 8)])
def test_parameter_count_closed_form(d, layers, heads):
    b = make(hidden_size=d, num_layers=layers, num_heads=heads)
    actual = sum(p.numel() for p in b.parameters())
    vocab = len(b.vocab)
    assert actual == parameter_count(b.config, vocab) == brute_force_count(vocab, d, layers, 4 * d, 24)


def test_forward_shape():
    b = make()
    h = b.hidden([prompt(["a", "b", "c", "d", "e"])])
    assert h.shape == (1, 5, 32)
    assert b.encode(prompt(["a", "b", "c", "d", "e"]), positions=range(5)).shape == (5, 32)


def test_encode_deterministic():
    b = make()
    p = render_step1(compile_template("[T], the domain is [C], the area is [A]."), ["a", "b"])
    assert np.array_equal(b.encode(p), b.encode(p))
    assert b.encode(p).shape == (2, 32)


def test_padding_does_not_change_hidden_states():
    b = make()
    short, long = prompt(["a", "b"]), prompt(["a", "b", "c", "d", "e", "a"])
    alone = b.hidden([short])[0]
    batched = b.hidden([short, long])[0, :2]
    assert torch.allclose(alone, batched, atol=1e-12)


def test_sequence_too_long():
    with pytest.raises(SequenceTooLong):
        make().hidden([prompt(["a"] * 25)])


def test_vocabulary_case_and_virtual():
    v = Vocabulary(["Hello", "<label:X>"])
    assert v.id("hello") == v.id("HELLO") != v.id("[UNK]")
    assert v.id("<label:x>") == v.id("[UNK]")
    assert v.virtual_ids == [v.id("<label:X>")]


def test_virtual_words_scaled_to_mean_norm():
    b = make()
    table = b.encoder.tok.weight.detach()
    virtual = b.vocab.virtual_ids
    plain = [i for i in range(len(b.vocab)) if i not in virtual]
    target = table[plain].norm(dim=1).mean()
    assert torch.allclose(table[virtual].norm(dim=1), target.expand(len(virtual)))


def test_score_slot_single_candidate():
    b = make()
    d = b.score_slot(np.ones(32), ["<label:x>"])
    assert d.probs.tolist() == [1.0]


def test_score_slot_zero_hidden_is_uniform():
    b = make()
    d = b.score_slot(np.zeros(32), ["<label:x>", "<label:y>", "<label:z>"], symbols=["x", "y", "z"])
    np.testing.assert_allclose(d.probs, [1 / 3] * 3, rtol=0, atol=1e-15)
    assert d.candidates == ("x", "y", "z")


def test_score_slot_equal_embeddings_uniform():
    e = np.tile(np.arange(4.0), (5, 1))
    np.testing.assert_allclose(restricted_softmax(np.array([1.0, -2.0, 0.5, 3.0]), e), [0.2] * 5)


def test_score_slot_empty():
    with pytest.raises(EmptyCandidateSet):
        make().score_slot(np.ones(32), [])
    with pytest.raises(EmptyCandidateSet):
        restricted_softmax(np.ones(3), np.zeros((0, 3)))


def test_restricted_softmax_matches_backend():
    b = make()
    words = ["<label:x>", "<label:y>", "<label:z>", "a"]
    h = np.random.default_rng(0).normal(size=32)
    e = b.word_embeddings(words).detach().numpy()
    np.testing.assert_allclose(b.score_slot(h, words).probs, restricted_softmax(h, e), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-30, 30)),
    arrays(np.float64, (4, 6), elements=st.floats(-3, 3)),
    st.floats(-50, 50),
)
def test_softmax_shift_invariance(h, e, c):
    # adding c to every logit: append a coordinate whose hidden value is c and embedding 1
    base = restricted_softmax(h, e)
    shifted = restricted_softmax(np.append(h, c), np.hstack([e, np.ones((4, 1))]))
    np.testing.assert_allclose(base, shifted, rtol=1e-9, atol=1e-300)
    assert abs(base.sum() - 1) < 1e-12


def test_slot_distribution_validates_length():
    with pytest.raises(ValueError):
        SlotDistribution(("a", "b"), np.array([1.0]))


def test_slot_distribution_ties_lowest_index():
    assert SlotDistribution(("a", "b", "c"), np.array([0.4, 0.4, 0.2])).top() == "a"


@pytest.mark.parametrize("seed", range(5))
def test_nll_gradient_wrt_hidden_matches_finite_differences(seed):
    b = make(seed=seed)
    words = ["<label:x>", "<label:y>", "<label:z>"]
    h = torch.tensor(np.random.default_rng(seed).normal(size=32), requires_grad=True)

    def nll():
        return -b.candidate_log_probs(h, words)[1]

    nll().backward()
    hd = h.detach().clone()

    def f():
        return -b.candidate_log_probs(hd, words)[1].detach()

    numeric = central_difference(f, hd)
    err = relative_error(h.grad.numpy(), numeric.numpy())
    assert err.max() <= 1e-4
