import numpy as np
import pytest
import torch

from capsvqa.gradcheck import check_function
from capsvqa.text import PAD, UNK, QueryGenerator, QuestionEncoder, Vocabulary, pad_batch


def make_encoder(vocab_size=10, d_embed=4, d=5, max_len=8):
    torch.manual_seed(0)
    return QuestionEncoder(vocab_size, d_embed, d, max_len).double()


def test_vocabulary_specials_and_lookup(tmp_path):
    vocab = Vocabulary(["red", "square", "red"])
    assert vocab.words[:2] == [PAD, UNK]
    assert vocab.encode(["red", "zzz"]) == [vocab.index["red"], vocab.index[UNK]]
    vocab.save(tmp_path / "vocab.txt")
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded.words == vocab.words


def test_empty_question_rejected():
    with pytest.raises(ValueError):
        pad_batch([[]])


def test_zero_weights_give_zero_sentence_embedding():
    enc = make_encoder()
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    tokens, lengths = pad_batch([[2, 3, 4]])
    f_s, f_w = enc(tokens, lengths)
    assert torch.all(f_s == 0)
    assert torch.all(f_w == 0)


def test_encoding_deterministic():
    enc = make_encoder()
    tokens, lengths = pad_batch([[2, 3, 4, 5]])
    a = enc(tokens, lengths)
    b = enc(tokens, lengths)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_reversed_sentence_with_swapped_direction_weights_swaps_halves():
    enc = make_encoder(d=3)
    tokens, lengths = pad_batch([[2, 5, 7, 3]])
    f_s, _ = enc(tokens, lengths)
    with torch.no_grad():
        for name in ("weight_ih_l0", "weight_hh_l0", "bias_ih_l0", "bias_hh_l0"):
            fwd = getattr(enc.rnn, name).clone()
            rev = getattr(enc.rnn, name + "_reverse").clone()
            getattr(enc.rnn, name).copy_(rev)
            getattr(enc.rnn, name + "_reverse").copy_(fwd)
    rev_tokens, _ = pad_batch([[3, 7, 5, 2]])
    f_s_rev, _ = enc(rev_tokens, lengths)
    d = enc.d
    assert torch.allclose(f_s[:, :d], f_s_rev[:, d:], atol=1e-12)
    assert torch.allclose(f_s[:, d:], f_s_rev[:, :d], atol=1e-12)


def _query_inputs(d=4, lengths_list=(3,), max_len=0):
    torch.manual_seed(2)
    gen = np.random.default_rng(2)
    L = max(max(lengths_list), max_len)
    b = len(lengths_list)
    f_s = torch.tensor(gen.standard_normal((b, 2 * d)))
    f_w = torch.tensor(gen.standard_normal((b, L, 2 * d)))
    lengths = torch.tensor(list(lengths_list))
    for i, l in enumerate(lengths_list):
        f_w[i, l:] = 0.0
    return f_s, f_w, lengths


def test_padding_masked_out_of_word_attention():
    qg = QueryGenerator(d=4, steps=2).double()
    f_s, f_w, lengths = _query_inputs(lengths_list=(3,), max_len=7)
    q0 = qg.initial_query(1)
    q_short, a_short = qg.step(f_s, f_w[:, :3], lengths, q0, 1)
    q_padded, a_padded = qg.step(f_s, f_w, lengths, q0, 1)
    assert torch.allclose(q_short, q_padded, atol=1e-12)
    assert torch.all(a_padded[:, 3:] == 0)


def test_word_attention_normalized_every_step():
    qg = QueryGenerator(d=4, steps=3).double()
    f_s, f_w, lengths = _query_inputs(lengths_list=(3, 5, 2), max_len=5)
    q = qg.initial_query(3)
    for t in (1, 2, 3):
        q, a_w = qg.step(f_s, f_w, lengths, q, t)
        assert torch.allclose(a_w.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-9)
        assert torch.all(a_w >= 0)


def test_single_word_question_gets_full_attention():
    qg = QueryGenerator(d=4, steps=1).double()
    f_s, f_w, lengths = _query_inputs(lengths_list=(1,))
    q_t, a_w = qg.step(f_s, f_w, lengths, qg.initial_query(1), 1)
    assert torch.allclose(a_w, torch.ones(1, 1, dtype=torch.float64))
    projected = qg.word_proj(f_w[:, 0])
    assert torch.allclose(q_t, projected, atol=1e-12)


def test_zero_score_weights_give_uniform_attention():
    qg = QueryGenerator(d=4, steps=1).double()
    with torch.no_grad():
        qg.score.weight.zero_()
        qg.score.bias.zero_()
    f_s, f_w, lengths = _query_inputs(lengths_list=(5,))
    _, a_w = qg.step(f_s, f_w, lengths, qg.initial_query(1), 1)
    assert torch.allclose(a_w, torch.full((1, 5), 0.2, dtype=torch.float64), atol=1e-12)


def test_step_out_of_range_raises():
    qg = QueryGenerator(d=4, steps=2).double()
    f_s, f_w, lengths = _query_inputs(lengths_list=(3,))
    with pytest.raises(ValueError):
        qg.step(f_s, f_w, lengths, qg.initial_query(1), 3)


def test_query_step_gradients_match_finite_differences():
    torch.manual_seed(3)
    gen = np.random.default_rng(3)
    qg = QueryGenerator(d=3, steps=2).double()
    f_s = torch.tensor(gen.standard_normal((1, 6)), requires_grad=True)
    f_w = torch.tensor(gen.standard_normal((1, 3, 6)), requires_grad=True)
    q_prev = torch.tensor(gen.standard_normal((1, 3)), requires_grad=True)
    lengths = torch.tensor([3])
    leaves = list(qg.parameters()) + [f_s, f_w, q_prev]
    err, _ = check_function(lambda: qg.step(f_s, f_w, lengths, q_prev, 1), leaves, seed=0)
    assert err <= 1e-4


def test_encoder_gradients_match_finite_differences():
    enc = QuestionEncoder(vocab_size=5, d_embed=3, d=3, max_len=6).double()
    tokens = torch.tensor([[2, 3, 4]])
    lengths = torch.tensor([3])
    err, _ = check_function(lambda: enc(tokens, lengths), list(enc.parameters()), seed=0)
    assert err <= 1e-4
