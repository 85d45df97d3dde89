"""Training loop (joint loss, Adam, lr schedule), evaluation, attention dumps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tensor import NumericError, backward, no_grad
from .data import augment_hflip, load_sample_flow
from .metrics import SentenceRecord, corpus_report, wer
from .model import SignTranslationModel, save_checkpoint
from .search import beam_search

log = logging.getLogger("signflow.train")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_te: float = 1.0
    lambda_td: float = 1.0
    loss_mode: str = "nll"        # "paper" restores the 1 - P objective
    seed: int = 0
    grad_clip: float = 0.0        # 0 disables clipping
    hflip: bool = False           # train-time horizontal-flip doubling
    beam_width: int = 5
    length_penalty: float = 1.0
    eval_every: int = 1           # epochs between validation passes
    checkpoint_path: str = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size != 1:
            raise ValueError("train: epochs must be >= 1 and batch size is fixed at 1")
        if self.lr <= 0:
            raise ValueError("train: learning rate must be positive")


def learning_rate(epoch, base_lr):
    """Constant through epoch 5, then multiplied by e^-0.1 every epoch."""
    return base_lr * np.exp(-0.1 * max(0, epoch - 5))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr, grad_clip=0.0):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        if grad_clip > 0.0:
            norm = np.sqrt(sum(float((p.grad ** 2).sum())
                               for p in self.params.values() if p.grad is not None))
            scale = grad_clip / norm if norm > grad_clip else 1.0
        else:
            scale = 1.0
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            p.grad = None

    def state(self):
        out = {"step": float(self.step_count)}
        for name in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state(self, state):
        self.step_count = int(state.get("step", 0))
        for name in self.params:
            if f"m/{name}" in state:
                self.m[name] = np.array(state[f"m/{name}"])
                self.v[name] = np.array(state[f"v/{name}"])


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    skipped_ctc: int
    wer: float = None
    bleu: list = None


@dataclass
class TrainResult:
    model: SignTranslationModel
    log: list
    checkpoint_path: str = None
    aborted: bool = False
    abort_reason: str = None


class _PreparedSample:
    __slots__ = ("sample", "flow", "gloss_ids", "dec_input", "dec_target")

    def __init__(self, sample, flow, gloss_ids, dec_input, dec_target):
        self.sample = sample
        self.flow = flow
        self.gloss_ids = gloss_ids
        self.dec_input = dec_input
        self.dec_target = dec_target


def _token_frames(words, word_vocab, max_words):
    """Teacher-forcing pair: input [start] w..., target w... [end], padded."""
    ids = word_vocab.encode(words)[:max_words - 1]
    seq = [word_vocab.start_id] + ids + [word_vocab.end_id]
    seq += [word_vocab.pad_id] * (max_words + 1 - len(seq))
    return (np.array(seq[:-1], dtype=np.int64),
            np.array(seq[1:], dtype=np.int64))


def _prepare(manifest, samples, model, include_flipped=False):
    frames = model.config.stfe.input_shape[0]
    prepared = []
    for sample in samples:
        seq = load_sample_flow(manifest, sample)
        variants = [seq, augment_hflip(seq)] if include_flipped else [seq]
        for var in variants:
            flow = var.encoded
            if len(var) != frames:
                raise ValueError(f"sample {sample.sample_id}: {len(var)} fields "
                                 f"but the extractor expects {frames}")
            gloss_ids = manifest.gloss_vocab.encode(sample.glosses)
            dec_input, dec_target = _token_frames(sample.words, manifest.word_vocab,
                                                  model.config.max_words)
            prepared.append(_PreparedSample(sample, flow, gloss_ids,
                                            dec_input, dec_target))
    return prepared


def _check_compatibility(manifest, model):
    cfg = model.config
    if manifest.gloss_vocab.n_glosses != cfg.n_glosses:
        raise ValueError(f"model expects {cfg.n_glosses} glosses, manifest has "
                         f"{manifest.gloss_vocab.n_glosses}")
    if len(manifest.word_vocab) != cfg.word_vocab_size:
        raise ValueError(f"model expects a {cfg.word_vocab_size}-word vocabulary, "
                         f"manifest has {len(manifest.word_vocab)}")


def train(manifest, model_config, train_config):
    """Joint training over the manifest's train split; returns model + log."""
    cfg = train_config
    _seed = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, dropout_seed = _seed.spawn(3)
    model = SignTranslationModel(model_config, seed=init_seed)
    _check_compatibility(manifest, model)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    train_samples = manifest.split("train")
    if not train_samples:
        raise ValueError("train: manifest has no train split")
    prepared = _prepare(manifest, train_samples, model, include_flipped=cfg.hflip)
    eval_split = "test" if manifest.split("test") else "train"

    optimizer = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    vocab_hashes = {"gloss": manifest.gloss_vocab.digest(),
                    "word": manifest.word_vocab.digest()}
    records = []
    pad_id = manifest.word_vocab.pad_id

    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate(epoch, cfg.lr)
        order = shuffle_rng.permutation(len(prepared))
        losses = []
        skipped = 0
        for idx in order:
            item = prepared[idx]
            lambda_te = cfg.lambda_te
            if lambda_te > 0 and not model.ctc_feasible(item.gloss_ids):
                skipped += 1
                lambda_te = 0.0
            try:
                out = model.forward_train(item.flow, item.gloss_ids,
                                          item.dec_input, item.dec_target,
                                          pad_id, lambda_te=lambda_te,
                                          lambda_td=cfg.lambda_td,
                                          loss_mode=cfg.loss_mode,
                                          rng=dropout_rng)
                loss_val = out["loss"].item()
                if not np.isfinite(loss_val):
                    raise NumericError("non-finite loss")
                backward(out["loss"])
            except NumericError as err:
                # last-good checkpoint from the previous epoch stays on disk
                return TrainResult(model=model, log=records,
                                   checkpoint_path=cfg.checkpoint_path,
                                   aborted=True,
                                   abort_reason=f"non-finite loss at epoch "
                                                f"{epoch} ({err})")
            optimizer.step(lr, cfg.grad_clip)
            losses.append(loss_val)

        record = EpochRecord(epoch=epoch, lr=lr,
                             train_loss=float(np.mean(losses)),
                             skipped_ctc=skipped)
        if cfg.eval_every and epoch % cfg.eval_every == 0:
            report = evaluate_model(model, manifest, eval_split,
                                    beam_width=cfg.beam_width,
                                    length_penalty=cfg.length_penalty)
            record.wer = report.wer
            record.bleu = list(report.bleu.scores)
        records.append(record)
        log.info("epoch %d: lr=%.6g loss=%.4f wer=%s", epoch, lr,
                 record.train_loss, record.wer)
        if cfg.checkpoint_path:
            save_checkpoint(cfg.checkpoint_path, model, epoch, vocab_hashes,
                            optimizer_state=optimizer.state(),
                            meta={"train_config": asdict(cfg)})

    return TrainResult(model=model, log=records,
                       checkpoint_path=cfg.checkpoint_path)


def decode_sample(model, manifest, sample, beam_width=5, length_penalty=1.0):
    """Glosses via CTC best path, words via beam search, for one sample."""
    seq = load_sample_flow(manifest, sample)
    with no_grad():
        khat, _ = model.encode(seq.encoded, training=False)
    gloss_ids = model.recognize(khat)
    hyp_glosses = tuple(manifest.gloss_vocab.decode(gloss_ids))
    step_fn = model.make_stepper(khat)
    word_ids = beam_search(step_fn, manifest.word_vocab.start_id,
                           manifest.word_vocab.end_id,
                           max_len=model.config.max_words,
                           width=beam_width, length_penalty=length_penalty)
    if word_ids and word_ids[-1] == manifest.word_vocab.end_id:
        word_ids = word_ids[:-1]
    hyp_words = tuple(manifest.word_vocab.decode(word_ids))
    return hyp_glosses, hyp_words


def evaluate_model(model, manifest, split, beam_width=5, length_penalty=1.0):
    samples = manifest.split(split)
    if not samples:
        raise ValueError(f"evaluate: split {split!r} is empty")
    records = []
    for sample in samples:
        hyp_glosses, hyp_words = decode_sample(model, manifest, sample,
                                               beam_width, length_penalty)
        records.append(SentenceRecord(
            sample_id=sample.sample_id,
            ref_glosses=sample.glosses, hyp_glosses=hyp_glosses,
            ref_words=sample.words, hyp_words=hyp_words,
            wer=wer(sample.glosses, hyp_glosses)))
    return corpus_report(records)


def evaluate_checkpoint(checkpoint, manifest, split, beam_width=5,
                        length_penalty=1.0, report_path=None):
    """Evaluate a loaded Checkpoint; vocabulary hashes must match."""
    expect = {"gloss": manifest.gloss_vocab.digest(),
              "word": manifest.word_vocab.digest()}
    if checkpoint.vocab_hashes != expect:
        raise ValueError("checkpoint was trained with different vocabularies "
                         f"(saved {checkpoint.vocab_hashes}, manifest {expect})")
    model = checkpoint.build_model()
    report = evaluate_model(model, manifest, split, beam_width, length_penalty)
    if report_path:
        report.write(report_path)
    return report


def dump_attention(model, manifest, sample_id, out_path):
    """Write every attention map of one sample as sectioned decimal text."""
    sample = manifest.sample_by_id(sample_id)
    seq = load_sample_flow(manifest, sample)
    dec_input, _ = _token_frames(sample.words, manifest.word_vocab,
                                 model.config.max_words)
    enc_maps, dec_self, dec_cross = model.attention_maps(seq.encoded, dec_input)
    lines = [f"# attention maps for sample {sample_id}"]

    def emit(kind, maps):
        for layer, heads in enumerate(maps):
            for head, m in enumerate(heads):
                lines.append(f"[{kind} layer {layer} head {head} shape "
                             f"{m.shape[0]}x{m.shape[1]}]")
                for row in m:
                    lines.append(" ".join(f"{v:.6f}" for v in row))

    emit("encoder-self", enc_maps)
    emit("decoder-self", dec_self)
    emit("cross", dec_cross)
    out_path = Path(out_path)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_path
