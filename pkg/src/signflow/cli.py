"""Command-line entry point.

Subcommands: synth (generate the toy corpus), flow (precompute a flow cache
from frame images), train, eval, dump-attention, grad-check, shapes.
Options can also come from a JSON config file ({"model": {...},
"train": {...}}); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .data import (default_toy_spec, generate_synthetic, load_manifest,
                   save_corpus)
from .flow import FlowParams, load_flow_cache, save_flow_cache, video_to_flow
from .gradsuite import SUITES, run_suites
from .model import (ModelConfig, SignTranslationModel, load_checkpoint,
                    paper_model_config, toy_model_config)
from .stfe import stfe_shape_trace, table_config
from .train import (TrainConfig, dump_attention, evaluate_checkpoint, train)


def _add_run_flags(p):
    p.add_argument("--manifest", required=True, help="dataset manifest path")
    p.add_argument("--config", help="JSON config file (flags win)")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="signflow",
        description="Sign-language translation from dense motion fields.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate the deterministic toy corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--sentences", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fields", type=int, default=16)
    p.add_argument("--spatial", type=int, default=32)
    p.add_argument("--test-fraction", type=float, default=0.0)
    p.add_argument("--estimator", action="store_true",
                   help="estimate flow from rendered frames instead of "
                        "writing analytic fields")

    p = sub.add_parser("flow", help="precompute a flow cache from frame images")
    p.add_argument("--frames", required=True, help="directory of image frames")
    p.add_argument("--out", required=True, help="output .sflw cache file")
    p.add_argument("--m-max", type=float, default=8.0)
    p.add_argument("--size", type=int, default=227,
                   help="square spatial size fed to the extractor")

    p = sub.add_parser("train", help="joint training over a manifest")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--lambda-te", type=float, default=None)
    p.add_argument("--lambda-td", type=float, default=None)
    p.add_argument("--paper-loss-mode", action="store_true",
                   help="use the 1 - P recognition loss")
    p.add_argument("--no-attn-scaling", action="store_true",
                   help="disable 1/sqrt(d/C) attention score scaling")
    p.add_argument("--hflip", action="store_true",
                   help="double the train split with horizontal flips")
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--max-words", type=int, default=None)

    p = sub.add_parser("eval", help="decode a split and write the metric report")
    _add_run_flags(p)
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="write the report to this file")
    p.add_argument("--length-penalty", type=float, default=1.0)

    p = sub.add_parser("dump-attention", help="write all attention maps of a sample")
    _add_run_flags(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="run the finite-difference suites")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--suite", choices=sorted(SUITES), action="append",
                   help="restrict to specific suites (repeatable)")

    p = sub.add_parser("shapes", help="print the end-to-end shape conformance trace")

    return parser


def _load_config_file(path):
    if not path:
        return {}, {}
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return raw.get("model", {}), raw.get("train", {})


def _spatial_of_first_sample(manifest):
    seq = load_flow_cache(manifest.resolve(manifest.samples[0]))
    return seq.encoded.shape[1]


def _model_config(args, manifest, model_overrides):
    """Build the model geometry from the manifest, config file, then flags."""
    kw = {"frames": manifest.frames,
          "spatial": _spatial_of_first_sample(manifest),
          "n_glosses": manifest.gloss_vocab.n_glosses,
          "word_vocab_size": len(manifest.word_vocab)}
    kw.update(model_overrides)
    for flag, key in [("layers", "layers"), ("heads", "heads"),
                      ("d_ff", "d_ff"), ("dropout", "dropout"),
                      ("max_words", "max_words")]:
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    config = toy_model_config(**kw)
    if getattr(args, "no_attn_scaling", False):
        config.scale_scores = False
    return config


def _train_config(args, train_overrides):
    kw = dict(train_overrides)
    for flag, key in [("epochs", "epochs"), ("lr", "lr"), ("seed", "seed"),
                      ("lambda_te", "lambda_te"), ("lambda_td", "lambda_td"),
                      ("beam_width", "beam_width"), ("grad_clip", "grad_clip"),
                      ("eval_every", "eval_every")]:
        value = getattr(args, flag, None)
        if value is not None:
            kw[key] = value
    if getattr(args, "paper_loss_mode", False):
        kw["loss_mode"] = "paper"
    if getattr(args, "hflip", False):
        kw["hflip"] = True
    kw["checkpoint_path"] = args.ckpt
    valid = {f.name for f in dataclass_fields(TrainConfig)}
    unknown = set(kw) - valid
    if unknown:
        raise SystemExit(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**kw)


def cmd_synth(args):
    spec = default_toy_spec(fields=args.fields, spatial=args.spatial,
                            test_fraction=args.test_fraction,
                            use_estimator=args.estimator)
    manifest, flows = generate_synthetic(spec, args.sentences, args.seed)
    path = save_corpus(manifest, flows, args.out)
    print(f"wrote {len(manifest.samples)} samples to {path}")
    return 0


def cmd_flow(args):
    try:
        from PIL import Image
    except ImportError:
        raise SystemExit("the flow command needs Pillow for image frames "
                         "(pip install pillow)")
    frame_dir = Path(args.frames)
    paths = sorted(p for p in frame_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".ppm"))
    if len(paths) < 2:
        raise SystemExit(f"{frame_dir}: need at least 2 frame images")
    frames = np.stack([np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
                       for p in paths])
    params = FlowParams(target_size=(args.size, args.size))
    seq = video_to_flow(frames, params, m_max=args.m_max)
    save_flow_cache(args.out, seq)
    print(f"wrote {len(seq)} fields ({args.size}x{args.size}) to {args.out}")
    return 0


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    model_overrides, train_overrides = _load_config_file(args.config)
    model_config = _model_config(args, manifest, model_overrides)
    train_config = _train_config(args, train_overrides)
    result = train(manifest, model_config, train_config)
    for rec in result.log:
        line = f"epoch {rec.epoch:3d}  lr {rec.lr:.6e}  loss {rec.train_loss:.4f}"
        if rec.wer is not None:
            line += f"  wer {rec.wer:.2f}  bleu4 {rec.bleu[3]:.2f}"
        if rec.skipped_ctc:
            line += f"  (skipped {rec.skipped_ctc} infeasible ctc)"
        print(line)
    if result.aborted:
        print(f"aborted: {result.abort_reason}; last good checkpoint kept")
        return 1
    print(f"checkpoint written to {result.checkpoint_path}")
    return 0


def cmd_eval(args):
    manifest = load_manifest(args.manifest)
    checkpoint = load_checkpoint(args.ckpt)
    report = evaluate_checkpoint(checkpoint, manifest, args.split,
                                 beam_width=args.beam_width or 5,
                                 length_penalty=args.length_penalty,
                                 report_path=args.report)
    sys.stdout.write(report.format())
    return 0


def cmd_dump_attention(args):
    manifest = load_manifest(args.manifest)
    checkpoint = load_checkpoint(args.ckpt)
    model = checkpoint.build_model()
    out = dump_attention(model, manifest, args.sample, args.out)
    print(f"attention maps written to {out}")
    return 0


def cmd_grad_check(args):
    results = run_suites(seeds=args.seeds, names=args.suite)
    failed = False
    for name, reports in results.items():
        worst = max(r.max_rel_error for r in reports)
        ok = all(r.passed for r in reports)
        failed |= not ok
        print(f"{name:24s} {'PASS' if ok else 'FAIL'}  "
              f"worst {worst:.3e} over {len(reports)} seeds")
    return 1 if failed else 0


def cmd_shapes(args):
    config = paper_model_config()
    chain = stfe_shape_trace(config.stfe)
    length, width = config.stfe.feature_shape()
    print("End-to-end tensor shapes:")
    print("  flow input           (120, 227, 227, 3)")
    print(f"  temporal resample    {chain[0]}")
    print(f"  STFE features        ({length}, {width})")
    print(f"  encoder output       ({length}, {width})")
    print(f"  gloss posterior      ({length}, {config.n_glosses + 1})")
    print(f"  word input           ({config.max_words})")
    print(f"  word embedding       ({config.max_words}, {width})")
    print(f"  word distribution    ({config.max_words}, {config.word_vocab_size})")
    print("STFE block chain:")
    print(f"  input    {chain[0]}")
    for i, shape in enumerate(chain[1:], start=1):
        print(f"  block {i}  {shape}")
    print(f"  reshape  ({length}, {width})")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-attention": cmd_dump_attention,
    "grad-check": cmd_grad_check,
    "shapes": cmd_shapes,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
