import string

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advmt.gateway import (CapabilityError, DirectionError, EmptyInputError, EncoderLatents, VocabTable,
                           back_translate, check_mirror)
from advmt.tokenizer import MARKER, UNK, SubwordTokenizer
from advmt.toy import ToyAdapter, ToyCipherModel, TranslateOnly, make_toy, toy_corpus

ASCII_WORD = st.text(alphabet=string.ascii_letters + string.digits + string.punctuation, min_size=1, max_size=10)


def tiny_tokenizer(v=5):
    return SubwordTokenizer([UNK] + [MARKER + c for c in "abcdefghij"[:v - 1]], stopwords=frozenset())


# -- tokenizer

@settings(max_examples=300, deadline=None)
@given(st.lists(ASCII_WORD, min_size=1, max_size=8))
def test_tokenize_detokenize_round_trip(tokenizer, ws):
    text = " ".join(ws)
    tt = tokenizer.tokenize(text)
    assert len(tt.token_ids) == len(tt.spans) == len(tt.is_word_initial)
    assert tokenizer.detokenize(tt.token_ids) == text
    # spans ordered and non-overlapping
    for (a0, b0), (a1, b1) in zip(tt.spans, tt.spans[1:]):
        assert a0 < b0 <= a1 < b1


def test_masks_follow_marker_convention(tokenizer):
    wi = tokenizer.word_initial_mask()
    assert wi == [t.startswith(MARKER) for t in tokenizer.tokens]
    prot = tokenizer.protected_mask()
    assert prot[tokenizer.token_id(MARKER + "the")]
    assert prot[tokenizer.token_id(".")]
    assert not prot[tokenizer.token_id(MARKER + "house")]


def test_tokenizer_serialization(tokenizer):
    again = SubwordTokenizer.from_dict(tokenizer.to_dict())
    assert again.tokens == tokenizer.tokens
    assert again.tokenize("Cars get miles.").token_ids == tokenizer.tokenize("Cars get miles.").token_ids


# -- toy cipher

def test_cipher_shift_examples():
    tok = tiny_tokenizer(5)
    m = make_toy(shift=1, seed=3, dim=8, hidden=8, tokenizer=tok)
    assert m.translate(tok.from_ids([0, 1, 2])).token_ids == [1, 2, 3]
    ident = make_toy(shift=0, seed=3, dim=8, hidden=8, tokenizer=tok)
    assert ident.translate(tok.from_ids([2, 4])).token_ids == [2, 4]


def test_cipher_is_exact_on_full_vocab(toy):
    V = toy.vocab.size
    out = toy.translate(toy.tokenizer.from_ids(list(range(V))))
    assert out.token_ids == [(i + 1) % V for i in range(V)]


def test_empty_input_error(toy):
    with pytest.raises(EmptyInputError, match="empty input"):
        toy.tokenize("   ")
    with pytest.raises(EmptyInputError):
        toy.translate(toy.tokenizer.from_ids([]))


def test_decode_of_encode_equals_translate(toy, corpus):
    for row in corpus[:20]:
        src = toy.tokenize(row["src"])
        assert toy.decode_from_latents(toy.encode(src)).token_ids == toy.translate(src).token_ids
        assert np.array_equal(toy.encode(src).values, toy.encode(src).values)


def test_latents_are_embedding_times_matrix(toy):
    src = toy.tokenize("the cat sat")
    z = toy.encode(src).values
    assert np.allclose(z, toy.model.E_in[src.token_ids] @ toy.model.W)


def test_perturbed_latents_change_decoding(toy):
    src = toy.tokenize("the cat sat")
    z = toy.encode(src)
    other = toy.model.E_out[10] * 50.0
    shifted = EncoderLatents(z.values + other[None, :], z.source_len)
    assert toy.decode_from_latents(shifted).token_ids != toy.translate(src).token_ids


def test_nan_latents_rejected(toy):
    z = toy.encode(toy.tokenize("cat"))
    bad = EncoderLatents(np.full_like(z.values, np.nan), z.source_len)
    with pytest.raises(ValueError):
        toy.decode_from_latents(bad)


def test_loss_near_zero_for_exact_translation():
    m = make_toy(temperature=0.01)
    src = m.tokenize("the cat sat on the mat")
    loss, grad = m.loss_and_grad(src, m.translate(src))
    assert loss < 1e-6
    assert np.linalg.norm(grad) < 1e-4
    assert grad.shape == (len(src), m.vocab.dim)


def test_loss_matches_own_token_probabilities(toy, corpus):
    for row in corpus[:10]:
        src = toy.tokenize(row["src"])
        ref = toy.target_text(row["ref"])
        if len(ref) != len(src):
            continue
        loss, _ = toy.loss_and_grad(src, ref)
        logp = toy.token_logprobs(src)
        assert loss == pytest.approx(-np.mean(logp[np.arange(len(src)), ref.token_ids]), abs=1e-6)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_toy_gradient_finite_differences():
    rng = np.random.default_rng(0)
    model = ToyCipherModel.create(40, dim=6, hidden=5, shift=3, temperature=1.5, seed=1)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        emb = rng.normal(size=(n, 6))
        ref = rng.integers(0, 40, size=n)
        _, g = model.loss_grad_embeddings(emb, ref)
        fd = fd_grad(lambda e: model.loss_grad_embeddings(e, ref)[0], emb)
        assert rel_err(g, fd) <= 1e-4


def test_adapter_gradient_rows_past_reference_are_zero(toy):
    src = toy.tokenize("the cat sat on the mat")
    ref = toy.tokenizer.from_ids(toy.translate(src).token_ids[:3])
    _, g = toy.loss_and_grad(src, ref)
    assert g.shape == (len(src), toy.vocab.dim)
    assert np.all(g[3:] == 0)


def test_encode_vjp_matches_finite_differences(toy):
    src = toy.tokenize("the cat sat")
    rng = np.random.default_rng(1)
    G = rng.normal(size=(len(src), toy.model.hidden))
    emb = toy.model.E_in[src.token_ids]
    fd = fd_grad(lambda e: float(np.sum((e @ toy.model.W) * G)), emb)
    assert rel_err(toy.encode_vjp(src, G), fd) <= 1e-6


def test_back_translate_round_trip(toy_pair, corpus):
    fwd, rev = toy_pair
    check_mirror(fwd, rev)
    for row in corpus[:10]:
        src = fwd.tokenize(row["src"])
        back = back_translate(fwd.translate(src), rev)
        assert back.token_ids == src.token_ids
        assert back.text == row["src"]


def test_back_translate_direction_mismatch(toy_pair):
    fwd, rev = toy_pair
    with pytest.raises(DirectionError):
        check_mirror(fwd, fwd)
    with pytest.raises(DirectionError):
        back_translate(fwd.translate(fwd.tokenize("the cat")), fwd)


def test_translate_only_lacks_gradients(toy):
    black = TranslateOnly(toy)
    src = black.tokenize("the cat")
    assert black.translate(src).token_ids == toy.translate(src).token_ids
    with pytest.raises(CapabilityError, match="gradients unsupported"):
        black.loss_and_grad(src, src)
    with pytest.raises(CapabilityError):
        black.encode(src)


def test_vocab_table_validation():
    with pytest.raises(ValueError):
        VocabTable(np.array([[np.inf, 0.0]]), [True], [False])
    with pytest.raises(ValueError):
        VocabTable(np.zeros((3, 2)), [True, False], [False, False, False])


def test_toy_serialization_round_trip(tmp_path, toy):
    path = tmp_path / "toy.json"
    toy.save(path)
    again = ToyAdapter.load(path)
    src = toy.tokenize("Cars get many more miles to the gallon.")
    assert again.translate(src).token_ids == toy.translate(src).token_ids
    assert np.array_equal(again.vocab.embeddings, toy.vocab.embeddings)


def test_toy_corpus_shape_and_determinism(toy):
    a = toy_corpus(toy, 15, seed=2)
    b = toy_corpus(toy, 15, seed=2)
    assert a == b
    for row in a:
        assert row["src"][0].isupper() and row["src"].endswith(".")
        assert len(toy.target_text(row["ref"])) == len(toy.tokenize(row["src"]))
