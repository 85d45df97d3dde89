"""Model assembly, checkpoint round trips, lr schedule, training loop."""

import numpy as np
import pytest

from signflow.data import default_toy_spec, generate_synthetic, load_manifest, save_corpus
from signflow.model import (SignTranslationModel, load_checkpoint,
                            paper_model_config, save_checkpoint,
                            toy_model_config)
from signflow.train import (Adam, TrainConfig, dump_attention,
                            evaluate_checkpoint, evaluate_model,
                            learning_rate, train)
from signflow.tensor import Tensor, backward


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest, flows = generate_synthetic(default_toy_spec(), 10, seed=7)
    path = save_corpus(manifest, flows, root)
    return load_manifest(path)


def tiny_model_config():
    return toy_model_config(frames=16, spatial=32, n_glosses=14,
                            word_vocab_size=18, max_words=8,
                            layers=1, heads=2, d_ff=32)


def test_paper_config_dimensions():
    config = paper_model_config()
    model = SignTranslationModel(config, seed=0)
    assert model.feature_length == 58
    assert model.d_model == 128
    assert model.gloss_head.weight.shape == (128, 91)
    assert model.decoder.embedding.shape == (115, 128)


def test_parameters_are_sectioned():
    model = SignTranslationModel(tiny_model_config(), seed=0)
    names = set(model.parameters())
    assert any(n.startswith("stfe/") for n in names)
    assert any(n.startswith("mgrte/") for n in names)
    assert any(n.startswith("gloss-head/") for n in names)
    assert any(n.startswith("mgttd/") for n in names)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    config = tiny_model_config()
    model = SignTranslationModel(config, seed=3)
    rng = np.random.default_rng(0)
    flow = rng.random((16, 32, 32, 3))
    khat_before, _ = model.encode(flow)

    path = tmp_path / "model.sgck"
    save_checkpoint(path, model, epoch=4, vocab_hashes={"gloss": "g", "word": "w"})
    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 4
    assert ckpt.vocab_hashes == {"gloss": "g", "word": "w"}
    restored = ckpt.build_model()
    khat_after, _ = restored.encode(flow)
    assert np.array_equal(khat_before.data, khat_after.data)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.sgck"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_learning_rate_schedule_exact():
    base = 1e-4
    for epoch in range(1, 31):
        expect = base * np.exp(-0.1 * max(0, epoch - 5))
        got = learning_rate(epoch, base)
        assert abs(got - expect) <= 1e-12 * expect
    assert learning_rate(1, base) == base
    assert learning_rate(5, base) == base
    assert learning_rate(6, base) == pytest.approx(9.048374180359596e-05, rel=1e-12)
    assert learning_rate(7, base) == pytest.approx(8.187307530779819e-05, rel=1e-12)


def test_adam_converges_on_quadratic():
    rng = np.random.default_rng(0)
    target = rng.normal(size=(4, 4))
    w = Tensor(np.zeros((4, 4)), requires_grad=True)
    opt = Adam({"w": w})
    for _ in range(400):
        loss = ((w - Tensor(target)) ** 2).sum()
        backward(loss)
        opt.step(lr=0.05)
    np.testing.assert_allclose(w.data, target, atol=1e-3)


def test_fixed_seed_reproduces_first_epoch(corpus):
    config = tiny_model_config()
    losses = []
    for _ in range(2):
        tc = TrainConfig(epochs=1, lr=1e-3, seed=11, eval_every=0)
        result = train(corpus, config, tc)
        losses.append(result.log[0].train_loss)
    assert losses[0] == losses[1]


def test_loss_mostly_decreases_over_first_epochs(corpus):
    config = tiny_model_config()
    tc = TrainConfig(epochs=6, lr=1e-3, seed=5, eval_every=0)
    result = train(corpus, config, tc)
    losses = [r.train_loss for r in result.log]
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a)
    assert drops >= 4


def test_epoch_and_batch_counts_honored(corpus):
    config = tiny_model_config()
    tc = TrainConfig(epochs=3, lr=1e-3, seed=0, eval_every=0)
    result = train(corpus, config, tc)
    assert len(result.log) == 3
    assert tc.batch_size == 1


def test_hflip_doubles_effective_samples(corpus):
    from signflow.train import _prepare
    model = SignTranslationModel(tiny_model_config(), seed=0)
    plain = _prepare(corpus, corpus.split("train"), model, include_flipped=False)
    doubled = _prepare(corpus, corpus.split("train"), model, include_flipped=True)
    assert len(doubled) == 2 * len(plain)
    # flipped variants keep the annotations
    assert doubled[1].sample.glosses == doubled[0].sample.glosses


def test_evaluate_checkpoint_round_trip_identical_report(corpus, tmp_path):
    config = tiny_model_config()
    tc = TrainConfig(epochs=2, lr=1e-3, seed=1, eval_every=0,
                     checkpoint_path=str(tmp_path / "m.sgck"))
    result = train(corpus, config, tc)
    direct = evaluate_model(result.model, corpus, "train", beam_width=2)
    ckpt = load_checkpoint(tc.checkpoint_path)
    loaded = evaluate_checkpoint(ckpt, corpus, "train", beam_width=2,
                                 report_path=tmp_path / "report.txt")
    assert loaded.format() == direct.format()
    assert (tmp_path / "report.txt").read_text() == direct.format()


def test_evaluate_checkpoint_rejects_vocab_mismatch(corpus, tmp_path):
    config = tiny_model_config()
    model = SignTranslationModel(config, seed=0)
    path = tmp_path / "m.sgck"
    save_checkpoint(path, model, epoch=1,
                    vocab_hashes={"gloss": "stale", "word": "stale"})
    with pytest.raises(ValueError, match="vocabular"):
        evaluate_checkpoint(load_checkpoint(path), corpus, "train")


def test_report_contains_all_metrics(corpus):
    model = SignTranslationModel(tiny_model_config(), seed=0)
    report = evaluate_model(model, corpus, "train", beam_width=2)
    text = report.format()
    for key in ("WER=", "BLEU1=", "BLEU2=", "BLEU3=", "BLEU4="):
        assert key in text


def test_dump_attention_sections_and_causality(corpus, tmp_path):
    model = SignTranslationModel(tiny_model_config(), seed=2)
    out = dump_attention(model, corpus, corpus.samples[0].sample_id,
                         tmp_path / "attn.txt")
    text = out.read_text()
    assert "[encoder-self layer 0 head 0 shape 13x13]" in text
    assert "[decoder-self layer 0 head 0 shape 8x8]" in text
    assert "[cross layer 0 head 0 shape 13x13]" not in text
    assert "[cross layer 0 head 0 shape 8x13]" in text
    # decoder self-attention rows are exactly lower-triangular
    lines = text.splitlines()
    start = lines.index("[decoder-self layer 0 head 0 shape 8x8]") + 1
    rows = [list(map(float, lines[start + i].split())) for i in range(8)]
    for i, row in enumerate(rows):
        assert all(v == 0.0 for v in row[i + 1:])


def test_dump_attention_unknown_sample_rejected(corpus, tmp_path):
    model = SignTranslationModel(tiny_model_config(), seed=0)
    with pytest.raises(KeyError, match="nope"):
        dump_attention(model, corpus, "nope", tmp_path / "x.txt")


def test_vocab_size_mismatch_rejected(corpus):
    config = tiny_model_config()
    config.n_glosses = 5
    with pytest.raises(ValueError, match="glosses"):
        train(corpus, config, TrainConfig(epochs=1, eval_every=0))


def test_nan_abort_keeps_result(corpus):
    config = tiny_model_config()
    # absurd learning rate blows the loss up to inf/nan quickly
    tc = TrainConfig(epochs=3, lr=1e12, seed=0, eval_every=0)
    result = train(corpus, config, tc)
    assert result.aborted
    assert "non-finite" in result.abort_reason
