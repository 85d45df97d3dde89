"""Encoder: positions, attention math, layer composition, equivariance."""

import numpy as np
import pytest

from signflow.tensor import Tensor
from signflow.gradcheck import grad_check
from signflow.encoder import (Encoder, EncoderConfig, EncoderLayer,
                              MultiHeadAttention, positional_encoding,
                              self_attention_head)


def toy_config(layers=1, heads=2, d_model=8, d_ff=16, **kw):
    return EncoderConfig(layers=layers, heads=heads, d_model=d_model,
                         d_ff=d_ff, dropout=0.0, **kw)


def test_positional_encoding_row_zero():
    pe = positional_encoding(4, 6)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)  # sin(0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)  # cos(0)


def test_positional_encoding_rows_pairwise_distinct():
    pe = positional_encoding(500, 128)
    # exhaustive pairwise comparison
    diffs = np.abs(pe[:, None, :] - pe[None, :, :]).max(axis=2)
    diffs[np.diag_indices(500)] = 1.0
    assert diffs.min() > 0.0


def test_positional_encoding_rejects_odd_width():
    with pytest.raises(ValueError, match="even"):
        positional_encoding(4, 7)


def test_uniform_scores_average_values():
    # constant rows make every score identical, so attention averages V rows
    rng = np.random.default_rng(0)
    L, d, dh = 4, 6, 3
    x = Tensor(np.ones((L, d)))
    wk = Tensor(rng.normal(size=(d, dh)))
    wq = Tensor(rng.normal(size=(d, dh)))
    wv = Tensor(rng.normal(size=(d, dh)))
    out, attn = self_attention_head(x, wk, wq, wv)
    np.testing.assert_allclose(attn.data, np.full((L, L), 1 / L), atol=1e-12)
    v = x.data @ wv.data
    np.testing.assert_allclose(out.data, np.tile(v.mean(axis=0), (L, 1)), atol=1e-12)


def test_head_matches_brute_force_matrices():
    rng = np.random.default_rng(1)
    L, d, dh = 3, 4, 2
    x = rng.normal(size=(L, d))
    wk, wq, wv = (rng.normal(size=(d, dh)) for _ in range(3))
    out, attn = self_attention_head(Tensor(x), Tensor(wk), Tensor(wq), Tensor(wv))

    # independent 3x3 computation
    h, q, v = x @ wk, x @ wq, x @ wv
    scores = (q @ h.T) / np.sqrt(dh)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    a = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(attn.data, a, atol=1e-12)
    np.testing.assert_allclose(out.data, a @ v, atol=1e-12)


def test_attention_rows_sum_to_one_scaled_and_unscaled():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(5, 6)) * 3)
    ws = [Tensor(rng.normal(size=(6, 3))) for _ in range(3)]
    for scale in (True, False):
        _, attn = self_attention_head(x, *ws, scale=scale)
        np.testing.assert_allclose(attn.data.sum(axis=1), np.ones(5), atol=1e-9)
        assert np.all(attn.data >= 0)


def test_layer_output_shape():
    rng = np.random.default_rng(3)
    cfg = EncoderConfig(layers=1, heads=8, d_model=128, d_ff=64, dropout=0.0)
    layer = EncoderLayer(cfg, rng)
    out, maps = layer(Tensor(rng.normal(size=(58, 128))))
    assert out.shape == (58, 128)
    assert len(maps) == 8 and maps[0].shape == (58, 58)


def test_zeroed_attention_output_leaves_ff_path():
    rng = np.random.default_rng(4)
    cfg = toy_config()
    layer = EncoderLayer(cfg, rng)
    layer.attention.w_out.data[:] = 0.0
    x = rng.normal(size=(5, 8))
    out, _ = layer(Tensor(x))

    # residual-only reference: norm2(norm1(x) + ff(norm1(x)))
    def ln(v, gain, bias):
        mu = v.mean(axis=-1, keepdims=True)
        sd = np.sqrt(v.var(axis=-1, keepdims=True) + 1e-5)
        return (v - mu) / sd * gain + bias

    n1 = ln(x, layer.norm1.gain.data, layer.norm1.bias.data)
    ff = np.maximum(n1 @ layer.ff.w1.data + layer.ff.b1.data, 0.0) @ layer.ff.w2.data + layer.ff.b2.data
    expect = ln(n1 + ff, layer.norm2.gain.data, layer.norm2.bias.data)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_encoder_layer_gradient():
    rng = np.random.default_rng(5)
    cfg = toy_config()
    layer = EncoderLayer(cfg, rng)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    params = list(layer.parameters().values())

    def loss(*_):
        out, _maps = layer(x)
        return (out ** 2).sum()

    report = grad_check(loss, [x] + params)
    assert report.passed, str(report)


def test_stack_shapes_and_map_counts():
    rng = np.random.default_rng(6)
    cfg = EncoderConfig(layers=2, heads=8, d_model=128, d_ff=32, dropout=0.0)
    enc = Encoder(cfg, rng)
    khat, maps = enc(Tensor(rng.normal(size=(58, 128))))
    assert khat.shape == (58, 128)
    assert len(maps) == 2 and all(len(layer) == 8 for layer in maps)
    assert all(m.shape == (58, 58) for layer in maps for m in layer)


def test_single_layer_stack_equals_layer():
    rng_a = np.random.default_rng(7)
    rng_b = np.random.default_rng(7)
    cfg = toy_config(use_positions=False)
    enc = Encoder(cfg, rng_a)
    layer = EncoderLayer(cfg, rng_b)
    x = np.random.default_rng(8).normal(size=(5, 8))
    out_stack, _ = enc(Tensor(x))
    out_layer, _ = layer(Tensor(x))
    np.testing.assert_allclose(out_stack.data, out_layer.data, atol=1e-12)


def test_permutation_equivariance_without_positions():
    rng = np.random.default_rng(9)
    cfg = toy_config(layers=2, use_positions=False)
    enc = Encoder(cfg, rng)
    x = np.random.default_rng(10).normal(size=(6, 8))
    perm = np.random.default_rng(11).permutation(6)
    base, _ = enc(Tensor(x))
    permuted, _ = enc(Tensor(x[perm]))
    np.testing.assert_allclose(permuted.data, base.data[perm], atol=1e-10)


def test_positions_break_permutation_equivariance():
    rng = np.random.default_rng(12)
    cfg = toy_config(layers=1, use_positions=True)
    enc = Encoder(cfg, rng)
    x = np.random.default_rng(13).normal(size=(6, 8))
    perm = np.roll(np.arange(6), 1)
    base, _ = enc(Tensor(x))
    permuted, _ = enc(Tensor(x[perm]))
    assert not np.allclose(permuted.data, base.data[perm])


def test_invalid_width_rejected():
    rng = np.random.default_rng(0)
    enc = Encoder(toy_config(), rng)
    with pytest.raises(ValueError, match="expected"):
        enc(Tensor(np.zeros((4, 9))))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        EncoderConfig(layers=1, heads=3, d_model=8)
    with pytest.raises(ValueError, match="layer"):
        EncoderConfig(layers=0, heads=2, d_model=8)
