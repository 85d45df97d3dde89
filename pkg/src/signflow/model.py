"""Full translation model: extractor, encoder, gloss head, decoder; checkpoints.

A checkpoint is a sectioned little-endian binary file (magic "SGCK"): a JSON
snapshot (architecture, training setup, epoch counter, vocabulary hashes)
followed by named float64 arrays grouped into the sections stfe / mgrte /
gloss-head / mgttd / optimizer.  Arrays round-trip bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .ctc import GlossHead, best_path_decode, ctc_loss, required_steps
from .decoder import Decoder, DecoderConfig, decoder_loss, joint_loss
from .encoder import Encoder, EncoderConfig
from .stfe import BlockSpec, Stfe, StfeConfig, table_config, toy_config

CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture: extractor geometry plus the symmetric transformer sizes."""
    stfe: StfeConfig
    layers: int = 2              # B, encoder and decoder both
    heads: int = 8               # C
    d_ff: int = 2048
    dropout: float = 0.1
    scale_scores: bool = True
    n_glosses: int = 90
    word_vocab_size: int = 115
    max_words: int = 12          # M, [start]/[end] included

    def to_dict(self):
        d = asdict(self)
        d["stfe"] = {"input_shape": list(self.stfe.input_shape),
                     "blocks": [asdict(b) for b in self.stfe.blocks]}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        stfe = d.pop("stfe")
        blocks = tuple(BlockSpec(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in b.items()})
                       for b in stfe["blocks"])
        cfg = StfeConfig(input_shape=tuple(stfe["input_shape"]), blocks=blocks)
        return cls(stfe=cfg, **d)


def paper_model_config():
    """The full-scale published geometry: (58, 128) features, 91/115 logits."""
    return ModelConfig(stfe=table_config())


def toy_model_config(frames=16, spatial=32, n_glosses=14, word_vocab_size=18,
                     max_words=8, layers=1, heads=4, d_ff=64, dropout=0.0):
    """Desk-scale geometry used by the synthetic corpus."""
    return ModelConfig(stfe=toy_config(frames=frames, spatial=spatial),
                       layers=layers, heads=heads, d_ff=d_ff, dropout=dropout,
                       n_glosses=n_glosses, word_vocab_size=word_vocab_size,
                       max_words=max_words)


class SignTranslationModel:
    """Flow volume in; gloss posterior and word distributions out."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.stfe = Stfe(config.stfe, rng)
        length, width = self.stfe.feature_shape
        self.feature_length = length
        self.d_model = width
        enc_cfg = EncoderConfig(layers=config.layers, heads=config.heads,
                                d_model=width, d_ff=config.d_ff,
                                dropout=config.dropout,
                                scale_scores=config.scale_scores)
        self.encoder = Encoder(enc_cfg, rng)
        self.gloss_head = GlossHead(width, config.n_glosses, rng)
        dec_cfg = DecoderConfig(layers=config.layers, heads=config.heads,
                                d_model=width, d_ff=config.d_ff,
                                vocab_size=config.word_vocab_size,
                                max_len=config.max_words,
                                dropout=config.dropout,
                                scale_scores=config.scale_scores)
        self.decoder = Decoder(dec_cfg, rng)

    # -- forward paths ----------------------------------------------------

    def encode(self, flow_volume, training=False, rng=None):
        """(T, H, W, 3) encoded flow to (khat, encoder attention maps)."""
        k = self.stfe(flow_volume, training=training)
        return self.encoder(k, rng=rng, training=training)

    def forward_train(self, flow_volume, gloss_ids, dec_input, dec_target,
                      pad_id, lambda_te=1.0, lambda_td=1.0, loss_mode="nll",
                      rng=None):
        """Joint teacher-forced pass; returns the loss terms."""
        khat, _ = self.encode(flow_volume, training=True, rng=rng)
        loss_te = None
        if lambda_te > 0:
            posterior = self.gloss_head(khat)
            loss_te = ctc_loss(posterior, gloss_ids, mode=loss_mode)
        dist, _, _ = self.decoder(dec_input, khat, rng=rng, training=True)
        loss_td = decoder_loss(dist, dec_target, pad_id)
        if loss_te is None:
            total = joint_loss(Tensor(0.0), loss_td, 0.0, lambda_td)
        else:
            total = joint_loss(loss_te, loss_td, lambda_te, lambda_td)
        return {"loss": total,
                "loss_te": None if loss_te is None else loss_te.item(),
                "loss_td": loss_td.item()}

    def recognize(self, khat):
        """CTC best-path gloss ids from encoded features."""
        with no_grad():
            posterior = self.gloss_head(khat)
        return best_path_decode(posterior)

    def make_stepper(self, khat):
        """Step function for the decoders: token prefix -> log-prob vector."""
        khat_const = Tensor(khat.data if isinstance(khat, Tensor) else khat)

        def step_fn(prefix):
            with no_grad():
                dist, _, _ = self.decoder(np.asarray(prefix, dtype=np.int64),
                                          khat_const, training=False)
            with np.errstate(divide="ignore"):
                return np.log(dist.data[-1])

        return step_fn

    def attention_maps(self, flow_volume, dec_input):
        """All maps for one sample: encoder self, decoder self, cross."""
        with no_grad():
            khat, enc_maps = self.encode(flow_volume, training=False)
            _, dec_self, dec_cross = self.decoder(dec_input, khat, training=False)
        return enc_maps, dec_self, dec_cross

    def ctc_feasible(self, gloss_ids):
        return required_steps(gloss_ids) <= self.feature_length

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        """Flat name -> Tensor map, names prefixed by checkpoint section."""
        params = {}
        for k, v in self.stfe.parameters().items():
            params[f"stfe/{k}"] = v
        for k, v in self.encoder.parameters().items():
            params[f"mgrte/{k}"] = v
        for k, v in self.gloss_head.parameters().items():
            params[f"gloss-head/{k}"] = v
        for k, v in self.decoder.parameters().items():
            params[f"mgttd/{k}"] = v
        return params

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_arrays(self):
        arrays = {name: p.data for name, p in self.parameters().items()}
        for k, v in self.stfe.buffers().items():
            arrays[f"stfe/{k}"] = v
        return arrays

    def load_state_arrays(self, arrays):
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        extra = set(arrays) - set(own)
        if missing or extra:
            raise ValueError(f"checkpoint state mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        params = self.parameters()
        for name, value in arrays.items():
            target = params[name].data if name in params else own[name]
            if target.shape != value.shape:
                raise ValueError(f"checkpoint array {name}: shape {value.shape} "
                                 f"!= expected {target.shape}")
            target[...] = value


# ---------------------------------------------------------------------------
# checkpoint file format
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    vocab_hashes: dict
    arrays: dict                       # flat name -> np.ndarray
    optimizer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def build_model(self, seed=0):
        model = SignTranslationModel(self.config, seed=seed)
        model.load_state_arrays(self.arrays)
        return model


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(fh):
    (n,) = struct.unpack("<H", fh.read(2))
    return fh.read(n).decode("utf-8")


def _pack_array(name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = _pack_str(name) + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def _read_array(fh):
    name = _read_str(fh)
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, model, epoch, vocab_hashes, optimizer_state=None,
                    meta=None):
    arrays = model.state_arrays()
    optimizer_state = optimizer_state or {}
    snapshot = {"config": model.config.to_dict(), "epoch": int(epoch),
                "vocab_hashes": dict(vocab_hashes), "meta": meta or {},
                "optimizer_scalars": {k: v for k, v in optimizer_state.items()
                                      if not isinstance(v, np.ndarray)}}
    opt_arrays = {k: v for k, v in optimizer_state.items()
                  if isinstance(v, np.ndarray)}
    blob = json.dumps(snapshot, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            fh.write(_pack_array(name, arrays[name]))
        fh.write(struct.pack("<I", len(opt_arrays)))
        for name in sorted(opt_arrays):
            fh.write(_pack_array(name, opt_arrays[name]))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        snapshot = json.loads(fh.read(blob_len).decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        arrays = dict(_read_array(fh) for _ in range(n_arrays))
        (n_opt,) = struct.unpack("<I", fh.read(4))
        optimizer = dict(_read_array(fh) for _ in range(n_opt))
    optimizer.update(snapshot.get("optimizer_scalars", {}))
    return Checkpoint(config=ModelConfig.from_dict(snapshot["config"]),
                      epoch=snapshot["epoch"],
                      vocab_hashes=snapshot["vocab_hashes"],
                      arrays=arrays, optimizer=optimizer,
                      meta=snapshot.get("meta", {}))
