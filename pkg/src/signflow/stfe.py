"""Spatiotemporal feature extractor: six volumetric blocks, flow in, (L, d) out.

Each block runs 3-D convolution -> per-channel normalization -> ReLU ->
3-D max pooling on a channels-last (T, H, W, C) volume.  The published
per-block output shapes are normative; the kernel/stride/padding
parameterization below was solved to reproduce that exact chain
(the original parameter table is internally inconsistent, e.g. a (1,1,1)
kernel cannot shrink the temporal extent on its own):

    (128, 227, 227, 3)
    block 1: conv k(3,3,3) s(2,2,2)           -> pool k(1,3,3) s(1,2,2) p(0,1,1)  => (63, 57, 57, 64)
    blocks 2-6: conv k(2,1,1) s(1,1,1)        -> pool k(1,2,2) s(1,2,2)           => temporal -1, spatial halved
    reshape                                                                        => (58, 128)

``stfe_shape_trace`` exposes the chain as pure shape arithmetic so
conformance can be asserted without running the numerics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    conv_kernel: tuple
    conv_stride: tuple = (1, 1, 1)
    conv_padding: tuple = (0, 0, 0)
    pool_kernel: tuple = (1, 2, 2)
    pool_stride: tuple = (1, 2, 2)
    pool_padding: tuple = (0, 0, 0)


@dataclass
class StfeConfig:
    """Input geometry plus the per-block convolution/pooling parameters."""
    input_shape: tuple                 # (T, H, W, C)
    blocks: tuple = field(default_factory=tuple)

    def feature_shape(self):
        """(L, d) of the flattened output; validates unit spatial extents."""
        chain = stfe_shape_trace(self)
        t, h, w, c = chain[-1]
        if (h, w) != (1, 1):
            raise ValueError(f"stfe: final block must reduce spatial extent to 1x1, got {chain[-1]}")
        return t, c


def _out_extent(size, kernel, stride, pad, what, block):
    ext = (size + 2 * pad - kernel) // stride + 1
    if ext < 1:
        raise ValueError(f"stfe: block {block} {what} does not fit "
                         f"(extent {size}, kernel {kernel}, stride {stride}, padding {pad})")
    return ext


def stfe_shape_trace(config):
    """Per-block output shapes by pure arithmetic, input shape included."""
    shape = tuple(config.input_shape)
    if len(shape) != 4:
        raise ValueError(f"stfe: input shape must be (T, H, W, C), got {shape}")
    chain = [shape]
    for b, spec in enumerate(config.blocks, start=1):
        dims = [_out_extent(shape[i], spec.conv_kernel[i], spec.conv_stride[i],
                            spec.conv_padding[i], "convolution", b) for i in range(3)]
        dims = [_out_extent(dims[i], spec.pool_kernel[i], spec.pool_stride[i],
                            spec.pool_padding[i], "pooling", b) for i in range(3)]
        shape = (dims[0], dims[1], dims[2], spec.out_channels)
        chain.append(shape)
    return chain


def check_trace(config, expected_chain):
    """Raise naming the first block whose shape misses the expected chain."""
    chain = stfe_shape_trace(config)
    if len(chain) != len(expected_chain):
        raise ValueError(f"stfe: {len(chain) - 1} blocks traced, "
                         f"{len(expected_chain) - 1} expected")
    for b, (got, want) in enumerate(zip(chain, expected_chain)):
        if tuple(got) != tuple(want):
            where = "input" if b == 0 else f"block {b}"
            raise ValueError(f"stfe: {where} produces {got}, expected {want}")


# Output chain published for the full-size extractor.
TABLE_CHAIN = [
    (128, 227, 227, 3),
    (63, 57, 57, 64),
    (62, 28, 28, 32),
    (61, 14, 14, 64),
    (60, 7, 7, 64),
    (59, 3, 3, 128),
    (58, 1, 1, 128),
]


def table_config():
    """Full-size six-block configuration reproducing the published chain."""
    narrowing = [BlockSpec(out_channels=c, conv_kernel=(2, 1, 1))
                 for c in (32, 64, 64, 128, 128)]
    cfg = StfeConfig(
        input_shape=(128, 227, 227, 3),
        blocks=(BlockSpec(out_channels=64, conv_kernel=(3, 3, 3),
                          conv_stride=(2, 2, 2), pool_kernel=(1, 3, 3),
                          pool_stride=(1, 2, 2), pool_padding=(0, 1, 1)),
                *narrowing),
    )
    check_trace(cfg, TABLE_CHAIN)
    return cfg


def toy_config(frames=16, spatial=65, channels=(8, 16, 32)):
    """Three-block small preset with the same block structure.

    For the default (16, 65, 65, 3) input the chain, derived by hand, is
    (15,31,31,8) -> (14,14,14,16) -> (13,1,1,32), ending at L=13, d=32;
    the last block pools the remaining spatial extent globally.
    """
    blocks = []
    t, h = frames, spatial
    for i, c in enumerate(channels):
        t -= 1                      # conv k(2,3,3) valid
        h -= 2
        last = i == len(channels) - 1
        pool_hw = h if last else 2  # final block: global spatial pool
        blocks.append(BlockSpec(out_channels=c, conv_kernel=(2, 3, 3),
                                pool_kernel=(1, pool_hw, pool_hw),
                                pool_stride=(1, pool_hw if last else 2,
                                             pool_hw if last else 2)))
        h = 1 if last else (h - 2) // 2 + 1
    return StfeConfig(input_shape=(frames, spatial, spatial, 3), blocks=tuple(blocks))


class Stfe:
    """The trainable extractor; weights follow the configured block chain."""

    def __init__(self, config, rng):
        self.config = config
        self.feature_shape = config.feature_shape()
        self.blocks = []
        cin = config.input_shape[-1]
        for spec in config.blocks:
            kt, kh, kw = spec.conv_kernel
            fan_in = kt * kh * kw * cin
            fan_out = spec.out_channels
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.blocks.append({
                "spec": spec,
                "weight": Tensor(rng.normal(0.0, scale, size=(kt, kh, kw, cin, fan_out)),
                                 requires_grad=True),
                "bias": Tensor(np.zeros(fan_out), requires_grad=True),
                "gain": Tensor(np.ones(fan_out), requires_grad=True),
                "beta": Tensor(np.zeros(fan_out), requires_grad=True),
                "running_mean": np.zeros(fan_out),
                "running_var": np.ones(fan_out),
            })
            cin = spec.out_channels

    def __call__(self, flow, training=False):
        """Map an encoded flow volume (T, H, W, 3) to features (L, d)."""
        x = flow if isinstance(flow, Tensor) else Tensor(flow)
        if tuple(x.shape) != tuple(self.config.input_shape):
            raise ValueError(f"stfe: expected input {tuple(self.config.input_shape)}, "
                             f"got {tuple(x.shape)}")
        for blk in self.blocks:
            spec = blk["spec"]
            x = T.conv3d(x, blk["weight"], blk["bias"],
                         stride=spec.conv_stride, padding=spec.conv_padding)
            x = T.batch_norm(x, blk["gain"], blk["beta"],
                             blk["running_mean"], blk["running_var"],
                             training=training)
            x = T.relu(x)
            x = T.max_pool3d(x, spec.pool_kernel, spec.pool_stride, spec.pool_padding)
        return x.reshape(self.feature_shape)

    def parameters(self):
        params = {}
        for i, blk in enumerate(self.blocks):
            for key in ("weight", "bias", "gain", "beta"):
                params[f"block{i}.{key}"] = blk[key]
        return params

    def buffers(self):
        bufs = {}
        for i, blk in enumerate(self.blocks):
            bufs[f"block{i}.running_mean"] = blk["running_mean"]
            bufs[f"block{i}.running_var"] = blk["running_var"]
        return bufs
