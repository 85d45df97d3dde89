"""Per-module finite-difference gradient suites, shared by tests and the CLI."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor
from . import tensor as T
from .gradcheck import grad_check
from .ctc import GlossHead, ctc_loss, required_steps
from .decoder import Decoder, DecoderConfig, DecoderLayer, decoder_loss, joint_loss
from .encoder import Encoder, EncoderConfig, EncoderLayer
from .stfe import BlockSpec, Stfe, StfeConfig


def _check_stfe(seed):
    rng = np.random.default_rng(seed)
    cfg = StfeConfig(input_shape=(4, 7, 7, 2),
                     blocks=(BlockSpec(out_channels=3, conv_kernel=(2, 2, 2),
                                       pool_kernel=(1, 2, 2), pool_stride=(1, 2, 2)),
                             BlockSpec(out_channels=4, conv_kernel=(2, 2, 2),
                                       pool_kernel=(1, 2, 2), pool_stride=(1, 2, 2))))
    net = Stfe(cfg, rng)
    x = Tensor(rng.random(cfg.input_shape), requires_grad=True)

    def loss(*_):
        return (net(x, training=True) ** 2).sum()

    return grad_check(loss, [x] + list(net.parameters().values()))


def _check_encoder_layer(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig(layers=1, heads=2, d_model=8, d_ff=12, dropout=0.0)
    layer = EncoderLayer(cfg, rng)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)

    def loss(*_):
        out, _ = layer(x)
        return (out ** 2).sum()

    return grad_check(loss, [x] + list(layer.parameters().values()))


def _check_ctc_loss(seed):
    rng = np.random.default_rng(seed)
    steps, classes = 5, 4
    z = rng.normal(size=(steps, classes))
    post = Tensor(np.exp(z) / np.exp(z).sum(axis=1, keepdims=True),
                  requires_grad=True)
    while True:
        target = rng.integers(1, classes, size=rng.integers(1, 4)).tolist()
        if required_steps(target) <= steps:
            break
    return grad_check(lambda p: ctc_loss(p, target), [post])


def _decoder_layer(rng):
    cfg = DecoderConfig(layers=1, heads=2, d_model=8, d_ff=12,
                        vocab_size=7, max_len=4, dropout=0.0)
    return DecoderLayer(cfg, rng)


def _check_masked_attention(seed):
    rng = np.random.default_rng(seed)
    layer = _decoder_layer(rng)
    e = Tensor(rng.normal(size=(4, 8)), requires_grad=True)

    def loss(*_):
        out, _ = layer.masked_self_attention(e)
        return (out ** 2).sum()

    params = list(layer.self_attention.parameters().values())
    params += list(layer.norm1.parameters().values())
    return grad_check(loss, [e] + params)


def _check_cross_attention(seed):
    rng = np.random.default_rng(seed)
    layer = _decoder_layer(rng)
    e_hat = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
    khat = Tensor(rng.normal(size=(5, 8)), requires_grad=True)

    def loss(*_):
        out, _ = layer.cross_attention(e_hat, khat)
        return (out ** 2).sum()

    params = (list(layer.cross.parameters().values())
              + list(layer.norm2.parameters().values())
              + list(layer.ff.parameters().values())
              + list(layer.norm3.parameters().values()))
    return grad_check(loss, [e_hat, khat] + params)


def _check_decoder_loss(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    targets = np.concatenate([rng.integers(1, 6, size=3), [0]])  # one pad

    def loss(t):
        return decoder_loss(T.softmax(t), targets, pad_id=0)

    return grad_check(loss, [logits])


def _check_joint(seed):
    """End-to-end: encoder + CTC head + decoder mixed by the joint loss."""
    rng = np.random.default_rng(seed)
    enc = Encoder(EncoderConfig(layers=1, heads=2, d_model=8, d_ff=10,
                                dropout=0.0), rng)
    head = GlossHead(8, 3, rng)
    dec = Decoder(DecoderConfig(layers=1, heads=2, d_model=8, d_ff=10,
                                vocab_size=7, max_len=3, dropout=0.0), rng)
    k = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    dec_in = np.array([1, 3, 4])
    dec_tgt = np.array([3, 4, 2])

    def loss(*_):
        khat, _ = enc(k)
        l_te = ctc_loss(head(khat), [2, 1])
        dist, _, _ = dec(dec_in, khat)
        l_td = decoder_loss(dist, dec_tgt, pad_id=0)
        return joint_loss(l_te, l_td, 1.0, 1.0)

    params = ([k] + list(enc.parameters().values())
              + list(head.parameters().values())
              + list(dec.parameters().values()))
    return grad_check(loss, params)


SUITES = {
    "stfe": _check_stfe,
    "encoder-layer": _check_encoder_layer,
    "ctc-loss": _check_ctc_loss,
    "masked-self-attention": _check_masked_attention,
    "cross-attention": _check_cross_attention,
    "decoder-loss": _check_decoder_loss,
    "joint-loss": _check_joint,
}


def run_suites(seeds=20, names=None):
    """Run each named suite over the given number of seeds."""
    names = names or list(SUITES)
    results = {}
    for name in names:
        fn = SUITES[name]
        results[name] = [fn(seed) for seed in range(seeds)]
    return results
