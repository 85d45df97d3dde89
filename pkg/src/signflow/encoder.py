"""Transformer encoder over the embedded kinematic sequence.

Sinusoidal positions are added once, then B identical layers apply C-head
self-attention followed by a position-wise feed-forward block, each with a
residual connection and layer normalization (post-norm).  Score scaling by
1/sqrt(d/C) is on by default; the unscaled variant matches the published
formulation and stays available behind ``scale_scores=False``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class EncoderConfig:
    layers: int = 2            # B
    heads: int = 8             # C
    d_model: int = 128         # d
    d_ff: int = 2048
    dropout: float = 0.1
    scale_scores: bool = True
    use_positions: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("encoder needs at least one layer")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def d_head(self):
        return self.d_model // self.heads


def positional_encoding(length, width):
    """Sinusoidal absolute positions: sin on even columns, cos on odd ones."""
    if length < 1 or width < 1:
        raise ValueError("positional_encoding: length and width must be positive")
    if width % 2 != 0:
        raise ValueError(f"positional_encoding: width must be even, got {width}")
    pos = np.arange(length)[:, None]
    i = np.arange(0, width, 2)[None, :]
    angle = pos / np.power(10000.0, i / width)
    pe = np.empty((length, width))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def self_attention_head(x, w_key, w_query, w_value, kv=None, scale=True,
                        causal=False, dropout=0.0, rng=None, training=False):
    """One attention head; returns (output rows, attention map).

    kv selects the key/value source (defaults to x, i.e. self-attention);
    cross-attention passes the encoder output here.  The attention map has
    one probability distribution per query row.
    """
    src = x if kv is None else kv
    h = T.matmul(src, w_key)
    q = T.matmul(x, w_query)
    v = T.matmul(src, w_value)
    scores = T.matmul(q, T.transpose(h))
    if scale:
        scores = scores * (1.0 / np.sqrt(q.shape[-1]))
    if causal:
        scores = T.causal_mask(scores)
    attn = T.softmax(scores)
    weights = T.dropout(attn, dropout, rng, training) if dropout else attn
    return T.matmul(weights, v), attn


def _xavier(rng, fan_in, fan_out, shape=None):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=shape or (fan_in, fan_out))


class MultiHeadAttention:
    """C independent heads, concatenated and linearly recombined."""

    def __init__(self, d_model, heads, rng, d_kv=None):
        d_kv = d_kv or d_model
        dh = d_model // heads
        self.heads = heads
        self.w_key = [Tensor(_xavier(rng, d_kv, dh), requires_grad=True) for _ in range(heads)]
        self.w_query = [Tensor(_xavier(rng, d_model, dh), requires_grad=True) for _ in range(heads)]
        self.w_value = [Tensor(_xavier(rng, d_kv, dh), requires_grad=True) for _ in range(heads)]
        self.w_out = Tensor(_xavier(rng, d_model, d_model), requires_grad=True)

    def __call__(self, x, kv=None, scale=True, causal=False, dropout=0.0,
                 rng=None, training=False):
        outs, maps = [], []
        for i in range(self.heads):
            o, a = self_attention_head(x, self.w_key[i], self.w_query[i],
                                       self.w_value[i], kv=kv, scale=scale,
                                       causal=causal, dropout=dropout, rng=rng,
                                       training=training)
            outs.append(o)
            maps.append(a)
        merged = T.matmul(T.concat(outs, axis=-1), self.w_out)
        return merged, maps

    def parameters(self):
        params = {}
        for i in range(self.heads):
            params[f"head{i}.key"] = self.w_key[i]
            params[f"head{i}.query"] = self.w_query[i]
            params[f"head{i}.value"] = self.w_value[i]
        params["out"] = self.w_out
        return params


class FeedForward:
    """Position-wise d -> d_ff -> d with ReLU."""

    def __init__(self, d_model, d_ff, rng):
        self.w1 = Tensor(_xavier(rng, d_model, d_ff), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = Tensor(_xavier(rng, d_ff, d_model), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x):
        return T.matmul(T.relu(T.matmul(x, self.w1) + self.b1), self.w2) + self.b2

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class LayerNorm:
    def __init__(self, width):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}


class EncoderLayer:
    def __init__(self, config, rng):
        self.config = config
        self.attention = MultiHeadAttention(config.d_model, config.heads, rng)
        self.norm1 = LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.d_ff, rng)
        self.norm2 = LayerNorm(config.d_model)

    def __call__(self, x, rng=None, training=False):
        cfg = self.config
        attended, maps = self.attention(x, scale=cfg.scale_scores,
                                        dropout=cfg.dropout, rng=rng,
                                        training=training)
        x = self.norm1(x + attended)
        ff_out = self.ff(x)
        ff_out = T.dropout(ff_out, cfg.dropout, rng, training)
        x = self.norm2(x + ff_out)
        return x, maps

    def parameters(self):
        params = {}
        for k, v in self.attention.parameters().items():
            params[f"attn.{k}"] = v
        for k, v in self.norm1.parameters().items():
            params[f"norm1.{k}"] = v
        for k, v in self.ff.parameters().items():
            params[f"ff.{k}"] = v
        for k, v in self.norm2.parameters().items():
            params[f"norm2.{k}"] = v
        return params


class Encoder:
    """Positional encoding plus B stacked self-attention layers."""

    def __init__(self, config, rng):
        self.config = config
        self.layers = [EncoderLayer(config, rng) for _ in range(config.layers)]

    def __call__(self, k, rng=None, training=False):
        """Encode an (L, d) feature sequence; returns (khat, attention maps).

        Attention maps come back as a list of layers, each a list of (L, L)
        numpy arrays, one per head.
        """
        if k.ndim != 2 or k.shape[1] != self.config.d_model:
            raise ValueError(f"encoder: expected (L, {self.config.d_model}), got {k.shape}")
        if self.config.use_positions:
            k = k + Tensor(positional_encoding(k.shape[0], k.shape[1]))
        all_maps = []
        for layer in self.layers:
            k, maps = layer(k, rng=rng, training=training)
            all_maps.append([m.data.copy() for m in maps])
        return k, all_maps

    def parameters(self):
        params = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                params[f"layer{i}.{k}"] = v
        return params
