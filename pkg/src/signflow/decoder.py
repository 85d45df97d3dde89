"""Transformer decoder: words in, cross-attended motion features, words out.

Each layer runs strictly-causal self-attention over the word embeddings
(positions j > i are masked before the softmax), then cross-attention with
queries from the word stream and keys/values from the encoded kinematic
sequence, then the feed-forward block.  Teacher forcing at train time:
decoder input is [start], w_1 .. w_{M-1} and the targets are
w_1 .. w_{M-1}, [end], with [pad] positions excluded from the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .encoder import (FeedForward, LayerNorm, MultiHeadAttention,
                      positional_encoding, _xavier)


@dataclass
class DecoderConfig:
    layers: int = 2            # B (symmetric with the encoder by default)
    heads: int = 8             # C
    d_model: int = 128         # D; must equal the encoder width d
    d_ff: int = 2048
    vocab_size: int = 115      # J, specials included
    max_len: int = 12          # M, [start]/[end] included
    dropout: float = 0.1
    scale_scores: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


def embed_words(tokens, table, add_positions=True):
    """Look up (M,) token ids in the (J, D) table and add positions."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ValueError(f"embed_words: expected a 1-D id sequence, got shape {tokens.shape}")
    e = T.embedding(table, tokens)
    if add_positions:
        e = e + Tensor(positional_encoding(tokens.size, table.shape[1]))
    return e


class DecoderLayer:
    """Masked self-attention, cross-attention over the encoder output, FF."""

    def __init__(self, config, rng, d_source=None):
        self.config = config
        d = config.d_model
        self.self_attention = MultiHeadAttention(d, config.heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross = MultiHeadAttention(d, config.heads, rng, d_kv=d_source or d)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, config.d_ff, rng)
        self.norm3 = LayerNorm(d)

    def masked_self_attention(self, e, rng=None, training=False):
        """Causal self-attention with residual + normalization; E -> E_hat."""
        cfg = self.config
        attended, maps = self.self_attention(e, causal=True, scale=cfg.scale_scores,
                                             dropout=cfg.dropout, rng=rng,
                                             training=training)
        return self.norm1(e + attended), maps

    def cross_attention(self, e_hat, khat, rng=None, training=False):
        """Queries from the word stream, keys/values from the encoded motion.

        Applies the cross MHA with residual + normalization, then the
        feed-forward block with its own residual + normalization; the result
        is the layer's (M, D) output.
        """
        cfg = self.config
        if khat.shape[-1] != e_hat.shape[-1]:
            raise ValueError(f"cross_attention: decoder width {e_hat.shape[-1]} "
                             f"!= encoder width {khat.shape[-1]}")
        attended, maps = self.cross(e_hat, kv=khat, scale=cfg.scale_scores,
                                    dropout=cfg.dropout, rng=rng, training=training)
        x = self.norm2(e_hat + attended)
        ff_out = T.dropout(self.ff(x), cfg.dropout, rng, training)
        return self.norm3(x + ff_out), maps

    def __call__(self, e, khat, rng=None, training=False):
        e_hat, self_maps = self.masked_self_attention(e, rng=rng, training=training)
        e_tilde, cross_maps = self.cross_attention(e_hat, khat, rng=rng, training=training)
        return e_tilde, self_maps, cross_maps

    def parameters(self):
        params = {}
        for k, v in self.self_attention.parameters().items():
            params[f"self.{k}"] = v
        for k, v in self.norm1.parameters().items():
            params[f"norm1.{k}"] = v
        for k, v in self.cross.parameters().items():
            params[f"cross.{k}"] = v
        for k, v in self.norm2.parameters().items():
            params[f"norm2.{k}"] = v
        for k, v in self.ff.parameters().items():
            params[f"ff.{k}"] = v
        for k, v in self.norm3.parameters().items():
            params[f"norm3.{k}"] = v
        return params


class Decoder:
    """Word embedding, B decoder layers, and the word-distribution head."""

    def __init__(self, config, rng):
        self.config = config
        d = config.d_model
        self.embedding = Tensor(rng.normal(0.0, 0.02, size=(config.vocab_size, d)),
                                requires_grad=True)
        self.layers = [DecoderLayer(config, rng) for _ in range(config.layers)]
        self.w_vocab = Tensor(_xavier(rng, d, config.vocab_size), requires_grad=True)
        self.b_vocab = Tensor(np.zeros(config.vocab_size), requires_grad=True)

    def __call__(self, tokens, khat, rng=None, training=False):
        """Run teacher-forced decoding; returns (distributions, self maps, cross maps)."""
        e = embed_words(tokens, self.embedding)
        self_maps, cross_maps = [], []
        for layer in self.layers:
            e, sm, cm = layer(e, khat, rng=rng, training=training)
            self_maps.append([m.data.copy() for m in sm])
            cross_maps.append([m.data.copy() for m in cm])
        return word_distribution(e, self.w_vocab, self.b_vocab), self_maps, cross_maps

    def parameters(self):
        params = {"embedding": self.embedding,
                  "vocab.weight": self.w_vocab, "vocab.bias": self.b_vocab}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                params[f"layer{i}.{k}"] = v
        return params


def word_distribution(e_tilde, weight, bias):
    """Linear + softmax over the word vocabulary; rows are distributions."""
    return T.softmax(T.matmul(e_tilde, weight) + bias)


def decoder_loss(distributions, targets, pad_id):
    """Mean token-level cross-entropy over non-pad target positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if distributions.shape[0] != targets.size:
        raise ValueError(f"decoder_loss: {distributions.shape[0]} distributions "
                         f"vs {targets.size} targets")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("decoder_loss: target is entirely padding")
    picked = T.take_per_row(distributions, np.where(keep, targets, 0))
    log_p = T.log(picked)
    masked = log_p * Tensor(keep.astype(float))
    return T.neg(masked.sum()) * (1.0 / count)


def joint_loss(loss_te, loss_td, lambda_te=1.0, lambda_td=1.0):
    """Weighted sum of the recognition and translation losses."""
    if lambda_te < 0 or lambda_td < 0:
        raise ValueError("joint_loss: weights must be non-negative")
    if lambda_te == 0 and lambda_td == 0:
        raise ValueError("joint_loss: at least one weight must be positive")
    if lambda_te == 0:
        return lambda_td * loss_td
    if lambda_td == 0:
        return lambda_te * loss_te
    return lambda_te * loss_te + lambda_td * loss_td
