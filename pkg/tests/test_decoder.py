"""Decoder: embeddings, causal masking, cross-attention, loss conventions."""

import numpy as np
import pytest

import signflow.tensor as T
from signflow.tensor import Tensor
from signflow.gradcheck import grad_check
from signflow.decoder import (Decoder, DecoderConfig, DecoderLayer,
                              decoder_loss, embed_words, joint_loss,
                              word_distribution)
from signflow.encoder import Encoder, EncoderConfig


def toy_decoder(rng, layers=1, heads=2, d_model=8, d_ff=16, vocab=9, max_len=5):
    cfg = DecoderConfig(layers=layers, heads=heads, d_model=d_model, d_ff=d_ff,
                        vocab_size=vocab, max_len=max_len, dropout=0.0)
    return Decoder(cfg, rng)


def test_embedding_shapes():
    rng = np.random.default_rng(0)
    table = Tensor(rng.normal(size=(20, 128)))
    assert embed_words(np.arange(10), table).shape == (10, 128)
    assert embed_words(np.arange(12), table).shape == (12, 128)


def test_same_token_different_rows():
    rng = np.random.default_rng(1)
    table = Tensor(rng.normal(size=(6, 8)))
    e = embed_words(np.array([3, 3]), table)
    assert not np.allclose(e.data[0], e.data[1])


def test_embed_rejects_unknown_token():
    table = Tensor(np.zeros((4, 8)))
    with pytest.raises(ValueError, match="out of range"):
        embed_words(np.array([4]), table)


def test_first_row_attends_only_to_itself():
    rng = np.random.default_rng(2)
    layer = DecoderLayer(DecoderConfig(layers=1, heads=2, d_model=8, d_ff=16,
                                       vocab_size=5, max_len=4, dropout=0.0), rng)
    e = Tensor(rng.normal(size=(4, 8)))
    _, maps = layer.masked_self_attention(e)
    for m in maps:
        np.testing.assert_allclose(m.data[0], [1.0, 0.0, 0.0, 0.0], atol=1e-12)


def test_upper_triangle_identically_zero():
    rng = np.random.default_rng(3)
    layer = DecoderLayer(DecoderConfig(layers=1, heads=4, d_model=8, d_ff=16,
                                       vocab_size=5, max_len=6, dropout=0.0), rng)
    e = Tensor(rng.normal(size=(6, 8)))
    _, maps = layer.masked_self_attention(e)
    for m in maps:
        assert np.all(m.data[np.triu_indices(6, k=1)] == 0.0)
        np.testing.assert_allclose(m.data.sum(axis=1), np.ones(6), atol=1e-9)


def test_causality_probe_bit_identical():
    # perturbing a suffix token leaves earlier outputs unchanged, exactly
    rng = np.random.default_rng(4)
    dec = toy_decoder(rng, layers=2)
    khat = Tensor(rng.normal(size=(7, 8)))
    tokens = np.array([1, 4, 2, 6, 3])
    base, _, _ = dec(tokens, khat)
    for k in range(1, len(tokens)):
        perturbed = tokens.copy()
        perturbed[k] = (perturbed[k] + 1) % dec.config.vocab_size
        out, _, _ = dec(perturbed, khat)
        assert np.array_equal(out.data[:k], base.data[:k])


def test_cross_attention_shapes_and_rows():
    rng = np.random.default_rng(5)
    cfg = DecoderConfig(layers=1, heads=8, d_model=128, d_ff=32,
                        vocab_size=115, max_len=12, dropout=0.0)
    layer = DecoderLayer(cfg, rng)
    e_hat = Tensor(rng.normal(size=(12, 128)))
    khat = Tensor(rng.normal(size=(58, 128)))
    out, maps = layer.cross_attention(e_hat, khat)
    assert out.shape == (12, 128)
    assert len(maps) == 8 and maps[0].shape == (12, 58)
    for m in maps:
        np.testing.assert_allclose(m.data.sum(axis=1), np.ones(12), atol=1e-9)


def test_cross_attention_width_mismatch_rejected():
    rng = np.random.default_rng(6)
    layer = DecoderLayer(DecoderConfig(layers=1, heads=2, d_model=8, d_ff=16,
                                       vocab_size=5, max_len=4, dropout=0.0), rng)
    with pytest.raises(ValueError, match="width"):
        layer.cross_attention(Tensor(np.zeros((4, 8))), Tensor(np.zeros((6, 10))))


def test_cross_attention_saturates_to_dominant_row():
    rng = np.random.default_rng(7)
    cfg = DecoderConfig(layers=1, heads=1, d_model=4, d_ff=8,
                        vocab_size=5, max_len=3, dropout=0.0, scale_scores=False)
    layer = DecoderLayer(cfg, rng)
    # craft keys so row 0 of khat dominates every score
    khat = np.zeros((5, 4))
    khat[0] = 50.0
    e_hat = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5)
    _, maps = layer.cross_attention(e_hat, Tensor(khat))
    attn = maps[0].data
    winner = attn.argmax(axis=1)
    assert np.all(winner == winner[0])
    assert np.all(attn.max(axis=1) > 0.99)


def test_cross_attention_gradient():
    rng = np.random.default_rng(8)
    layer = DecoderLayer(DecoderConfig(layers=1, heads=2, d_model=8, d_ff=12,
                                       vocab_size=5, max_len=4, dropout=0.0), rng)
    e_hat = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    khat = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    params = list(layer.parameters().values())

    def loss(*_):
        out, _maps = layer.cross_attention(e_hat, khat)
        return (out ** 2).sum()

    report = grad_check(loss, [e_hat, khat] + params)
    assert report.passed, str(report)


def test_masked_self_attention_gradient():
    rng = np.random.default_rng(9)
    layer = DecoderLayer(DecoderConfig(layers=1, heads=2, d_model=8, d_ff=12,
                                       vocab_size=5, max_len=4, dropout=0.0), rng)
    e = Tensor(rng.normal(size=(4, 8)), requires_grad=True)

    def loss(*_):
        out, _ = layer.masked_self_attention(e)
        return (out ** 2).sum()

    report = grad_check(loss, [e] + list(layer.parameters().values()))
    assert report.passed, str(report)


def test_word_distribution_uniform_and_stochastic():
    e = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
    dist = word_distribution(e, Tensor(np.zeros((8, 115))), Tensor(np.zeros(115)))
    assert dist.shape == (3, 115)
    np.testing.assert_allclose(dist.data, np.full((3, 115), 1 / 115), atol=1e-15)
    rng = np.random.default_rng(1)
    dist2 = word_distribution(e, Tensor(rng.normal(size=(8, 115))),
                              Tensor(rng.normal(size=115)))
    np.testing.assert_allclose(dist2.data.sum(axis=1), np.ones(3), atol=1e-12)


def test_decoder_loss_perfect_predictions():
    dist = np.full((3, 4), 1e-9)
    for i, t in enumerate([1, 2, 3]):
        dist[i, t] = 1.0 - 3e-9
    loss = decoder_loss(Tensor(dist), [1, 2, 3], pad_id=0)
    assert loss.item() == pytest.approx(0.0, abs=1e-8)


def test_decoder_loss_uniform_is_log_vocab():
    j = 115
    dist = Tensor(np.full((5, j), 1 / j))
    loss = decoder_loss(dist, [3, 9, 2, 7, 1], pad_id=0)
    assert loss.item() == pytest.approx(np.log(115), abs=1e-12)
    assert loss.item() == pytest.approx(4.745, abs=5e-4)


def test_decoder_loss_hand_computed():
    dist = np.array([[0.1, 0.6, 0.3],
                     [0.2, 0.2, 0.6],
                     [0.5, 0.4, 0.1]])
    expect = -(np.log(0.6) + np.log(0.6) + np.log(0.4)) / 3
    loss = decoder_loss(Tensor(dist), [1, 2, 1], pad_id=0)
    assert loss.item() == pytest.approx(expect, abs=1e-12)


def test_decoder_loss_ignores_padding():
    rng = np.random.default_rng(10)
    z = rng.random((5, 6)) + 0.05
    dist = z / z.sum(axis=1, keepdims=True)
    short = decoder_loss(Tensor(dist[:3]), [2, 3, 4], pad_id=0).item()
    padded = decoder_loss(Tensor(dist), [2, 3, 4, 0, 0], pad_id=0).item()
    assert padded == pytest.approx(short, abs=1e-12)


def test_decoder_loss_all_pad_rejected():
    dist = Tensor(np.full((2, 4), 0.25))
    with pytest.raises(ValueError, match="padding"):
        decoder_loss(dist, [0, 0], pad_id=0)


def test_decoder_loss_gradient():
    rng = np.random.default_rng(11)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)

    def loss(t):
        return decoder_loss(T.softmax(t), [2, 5, 0, 1], pad_id=0)

    report = grad_check(loss, [logits])
    assert report.passed, str(report)


def test_joint_loss_arithmetic_and_validation():
    a, b = Tensor(0.3), Tensor(0.7)
    assert joint_loss(a, b, 1.0, 1.0).item() == pytest.approx(1.0)
    assert joint_loss(a, b, 0.0, 1.0).item() == pytest.approx(0.7)
    assert joint_loss(a, b, 1.0, 0.0).item() == pytest.approx(0.3)
    with pytest.raises(ValueError, match="positive"):
        joint_loss(a, b, 0.0, 0.0)
    with pytest.raises(ValueError, match="non-negative"):
        joint_loss(a, b, -1.0, 1.0)


def test_joint_gradient_is_sum_of_task_gradients():
    rng = np.random.default_rng(12)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))

    def te():
        return ((x @ w) ** 2).sum()

    def td():
        return (T.softmax(x @ w) ** 2).sum()

    w.zero_grad()
    T.backward(te())
    g_te = w.grad.copy()
    w.zero_grad()
    T.backward(td())
    g_td = w.grad.copy()
    w.zero_grad()
    T.backward(joint_loss(te(), td(), 1.0, 1.0))
    np.testing.assert_allclose(w.grad, g_te + g_td, atol=1e-12)


def test_end_to_end_joint_gradient_toy_pipeline():
    # L=6, M=5, |G|=3, J=8: encoder + CTC head + decoder + joint loss
    from signflow.ctc import GlossHead, ctc_loss

    rng = np.random.default_rng(13)
    enc = Encoder(EncoderConfig(layers=1, heads=2, d_model=8, d_ff=12, dropout=0.0), rng)
    head = GlossHead(8, 3, rng)
    dec = toy_decoder(rng, vocab=8, max_len=5)
    k = Tensor(rng.normal(size=(6, 8)), requires_grad=True)
    tokens_in = np.array([1, 3, 4, 5, 6])
    targets = np.array([3, 4, 5, 6, 2])

    params = ([k] + list(enc.parameters().values()) + list(head.parameters().values())
              + list(dec.parameters().values()))

    def loss(*_):
        khat, _ = enc(k)
        l_te = ctc_loss(head(khat), [2, 1])
        dist, _, _ = dec(tokens_in, khat)
        l_td = decoder_loss(dist, targets, pad_id=0)
        return joint_loss(l_te, l_td, 1.0, 1.0)

    report = grad_check(loss, params)
    assert report.passed, str(report)
