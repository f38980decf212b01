"""Command-line interface.

Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .alignment import FeatureFormatError, export_features
from .argen import SamplingError, sample, save_token_sequences
from .autodiff import ContractError, NumericError, run_catalogue
from .checkpoint import CheckpointFormatError
from .config import RunConfig
from .tokenizer import TokenSequence, swap_tokens
from .train import (
    evaluate,
    frame_prediction_context,
    load_ar_model,
    load_clips,
    load_tokenizer,
    make_teacher,
    train_ar,
    train_tokenizer,
)
from .video import (
    VideoFormatError,
    dominant_palette_color,
    dump_frames,
    list_dataset,
    load_clip,
    make_dataset,
    save_clip,
)


class UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


class Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad usage, not argparse's 2
        raise UsageError(self, message)


def _build_parser() -> Parser:
    parser = Parser(prog="dera", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", help="generate a procedural clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)

    p = sub.add_parser("train-tokenizer", help="train the tokenizer")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None, help="override config.steps")

    p = sub.add_parser("train-ar", help="train the autoregressive generator")
    p.add_argument("--config", required=True)
    p.add_argument("--tokenizer", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("reconstruct", help="tokenize and decode one clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames-out", default=None, help="PPM frame dump prefix")

    p = sub.add_parser("generate", help="sample clips from a trained generator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--class", dest="class_index", type=int, default=None)
    p.add_argument("--predict-from", default=None, help="clip for frame prediction")
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("swap", help="swap token blocks between two clips")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--which", choices=["appearance", "motion"], default="appearance")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("export-features", help="export teacher features to DFEA files")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="reconstruction metrics over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of all primitives")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)

    return parser


def _cmd_gen_data(args) -> int:
    paths = make_dataset(args.out, args.clips, args.seed,
                         T=args.frames, H=args.height, W=args.width)
    print(f"wrote {len(paths)} clips to {args.out}")
    return 0


def _cmd_train_tokenizer(args) -> int:
    config = RunConfig.load(args.config)
    if args.steps is not None:
        config.steps = args.steps
    result = train_tokenizer(config, out_dir=args.out, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _cmd_train_ar(args) -> int:
    config = RunConfig.load(args.config)
    if args.steps is not None:
        config.steps = args.steps
    result = train_ar(config, out_dir=args.out, tokenizer_ckpt=args.tokenizer,
                      resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _cmd_reconstruct(args) -> int:
    model, _ = load_tokenizer(args.ckpt)
    clip = load_clip(args.input)
    recon = model.reconstruct(clip)
    recon.class_label = clip.class_label
    save_clip(args.out, recon)
    if args.frames_out:
        dump_frames(args.frames_out, recon)
    print(f"wrote {args.out}")
    return 0


def _cmd_generate(args) -> int:
    model, _ = load_ar_model(args.ckpt)
    tok_model, _ = load_tokenizer(args.tokenizer)
    if args.predict_from:
        condition = frame_prediction_context(load_clip(args.predict_from), tok_model)
    elif args.class_index is not None:
        condition = args.class_index
    else:
        raise ContractError("generate needs --class or --predict-from")
    prefix = Path(args.out)
    sequences = []
    for i in range(args.count):
        seq = sample(model, condition, seed=args.seed + i, cfg_scale=args.cfg_scale,
                     temperature=args.temperature, top_k=args.top_k)
        sequences.append(seq)
        cfg = tok_model.cfg
        clip = tok_model.detokenize(
            TokenSequence(seq, cfg.tokens_appearance, cfg.tokens_motion))
        save_clip(f"{prefix}_{i:03d}.dvid", clip)
    save_token_sequences(f"{prefix}.toks", np.stack(sequences))
    print(f"wrote {args.count} clips with prefix {prefix}")
    return 0


def _cmd_swap(args) -> int:
    model, _ = load_tokenizer(args.ckpt)
    clip_a = load_clip(args.a)
    clip_b = load_clip(args.b)
    seq_a = model.tokenize(clip_a)
    seq_b = model.tokenize(clip_b)
    new_a, new_b = swap_tokens(seq_a, seq_b, args.which)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dec_a = model.detokenize(new_a)
    dec_b = model.detokenize(new_b)
    save_clip(out_dir / "swapped_a.dvid", dec_a)
    save_clip(out_dir / "swapped_b.dvid", dec_b)
    dump_frames(out_dir / "swapped_a", dec_a)
    dump_frames(out_dir / "swapped_b", dec_b)
    report = out_dir / "swap_report.txt"
    lines = [
        f"swapped block: {args.which}",
        f"source_a_palette={dominant_palette_color(clip_a)}",
        f"source_b_palette={dominant_palette_color(clip_b)}",
        f"swapped_a_palette={dominant_palette_color(dec_a)}",
        f"swapped_b_palette={dominant_palette_color(dec_b)}",
    ]
    report.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_export_features(args) -> int:
    config = RunConfig.load(args.config)
    teacher = make_teacher(config.teacher, config.tokenizer)
    if teacher is None:
        raise ContractError("config.teacher.kind is 'none'; nothing to export")
    clips = [load_clip(p) for p in list_dataset(args.data)]
    written = export_features(teacher, clips, args.out)
    print(f"wrote {len(written)} feature files to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_tokenizer(args.ckpt)
    clips = [load_clip(p) for p in list_dataset(args.data)]
    report = evaluate(model, clips)
    for i, value in enumerate(report.psnr_per_clip):
        print(f"clip {i:04d}: psnr {value:.2f} dB")
    print(f"mean psnr:            {report.mean_psnr:.2f} dB")
    print(f"codebook usage:       {report.usage:.4f}")
    print(f"codebook perplexity:  {report.perplexity:.2f}")
    return 0


def _cmd_grad_check(args) -> int:
    reports = run_catalogue(points=args.points, tol=args.tol, verbose=True)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} primitives passed "
          f"(tol {args.tol:g}, {args.points} points)")
    return 2 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-tokenizer": _cmd_train_tokenizer,
    "train-ar": _cmd_train_ar,
    "reconstruct": _cmd_reconstruct,
    "generate": _cmd_generate,
    "swap": _cmd_swap,
    "export-features": _cmd_export_features,
    "eval": _cmd_eval,
    "grad-check": _cmd_grad_check,
}

_VALIDATION_ERRORS = (
    ContractError,
    ValueError,
    VideoFormatError,
    FeatureFormatError,
    CheckpointFormatError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        err.parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as err:
        err.parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericError, SamplingError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
